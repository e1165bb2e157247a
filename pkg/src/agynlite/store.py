"""Single durable key-value store: append-only log + in-memory index.

Every subsystem persists through this store. Keys are UTF-8 strings with
"/"-separated namespaces so each subsystem gets cheap prefix scans.
Writes are compare-and-set guarded; versions per key increase by exactly
one on every successful write.

On-disk layout:
  store.log   append-only record frames, each preceded by a 4-byte
              big-endian frame length; a frame is
              key_len(4BE) | key | value_len(4BE) | value | version(8BE).
              A frame with version 0 is a tombstone for the key.
  store.snap  8-byte big-endian log offset, then full-state frames.
              Recovery loads the snapshot and replays the log suffix.
"""

from __future__ import annotations

import os
import struct
import threading
from typing import Optional


class StoreError(Exception):
    pass


class VersionConflict(StoreError):
    """Compare-and-set failed: expected_version did not match."""


class NotFound(StoreError):
    pass


class StorageFailure(StoreError):
    """Underlying I/O failed; the store may be unusable."""


_LEN = struct.Struct(">I")
_VER = struct.Struct(">Q")


def _encode_frame(key: str, value: bytes, version: int) -> bytes:
    kb = key.encode("utf-8")
    return (
        _LEN.pack(len(kb)) + kb + _LEN.pack(len(value)) + value + _VER.pack(version)
    )


def _decode_frame(frame: bytes) -> tuple[str, bytes, int]:
    (klen,) = _LEN.unpack_from(frame, 0)
    key = frame[4 : 4 + klen].decode("utf-8")
    off = 4 + klen
    (vlen,) = _LEN.unpack_from(frame, off)
    off += 4
    value = frame[off : off + vlen]
    off += vlen
    (version,) = _VER.unpack_from(frame, off)
    return key, value, version


class Store:
    """Durable KV store with per-key CAS, prefix scan, and snapshots.

    Thread-safe: all operations serialize on one internal lock, which at
    desk scale is cheaper than per-key locking and trivially gives the
    per-key linearizability contract.

    path=None gives a purely in-memory store (tests, dry runs).
    """

    def __init__(self, path: Optional[str] = None):
        self._lock = threading.Lock()
        self._data: dict[str, tuple[bytes, int]] = {}
        self._dir = path
        self._log = None
        if path is not None:
            os.makedirs(path, exist_ok=True)
            self._recover()
            try:
                self._log = open(self._log_path, "ab")
            except OSError as e:
                raise StorageFailure(str(e)) from e

    @property
    def _log_path(self) -> str:
        return os.path.join(self._dir, "store.log")

    @property
    def _snap_path(self) -> str:
        return os.path.join(self._dir, "store.snap")

    # -- recovery ---------------------------------------------------------

    def _recover(self) -> None:
        log_offset = 0
        if os.path.exists(self._snap_path):
            try:
                with open(self._snap_path, "rb") as f:
                    raw = f.read()
            except OSError as e:
                raise StorageFailure(str(e)) from e
            (log_offset,) = _VER.unpack_from(raw, 0)
            pos = 8
            while pos < len(raw):
                (flen,) = _LEN.unpack_from(raw, pos)
                pos += 4
                key, value, version = _decode_frame(raw[pos : pos + flen])
                pos += flen
                self._data[key] = (value, version)
        if os.path.exists(self._log_path):
            try:
                with open(self._log_path, "rb") as f:
                    f.seek(log_offset)
                    raw = f.read()
            except OSError as e:
                raise StorageFailure(str(e)) from e
            pos = 0
            while pos + 4 <= len(raw):
                (flen,) = _LEN.unpack_from(raw, pos)
                if pos + 4 + flen > len(raw):
                    break  # torn tail write; ignore the partial frame
                key, value, version = _decode_frame(raw[pos + 4 : pos + 4 + flen])
                pos += 4 + flen
                if version == 0:
                    self._data.pop(key, None)
                else:
                    self._data[key] = (value, version)

    # -- operations -------------------------------------------------------

    def put(self, key: str, value: bytes, expected_version: Optional[int] = None) -> int:
        """Write a value; CAS against expected_version when given.

        Absent key counts as version 0 for CAS purposes. Returns the new
        version.
        """
        if not isinstance(value, (bytes, bytearray)):
            raise TypeError("value must be bytes")
        with self._lock:
            current = self._data.get(key)
            cur_ver = current[1] if current else 0
            if expected_version is not None and expected_version != cur_ver:
                raise VersionConflict(
                    f"{key}: expected version {expected_version}, have {cur_ver}"
                )
            new_ver = cur_ver + 1
            self._append(key, bytes(value), new_ver)
            self._data[key] = (bytes(value), new_ver)
            return new_ver

    def get(self, key: str) -> tuple[bytes, int]:
        with self._lock:
            rec = self._data.get(key)
            if rec is None:
                raise NotFound(key)
            return rec

    def get_or_none(self, key: str) -> Optional[tuple[bytes, int]]:
        with self._lock:
            return self._data.get(key)

    def scan(self, prefix: str) -> list[tuple[str, bytes, int]]:
        with self._lock:
            matches = [
                (k, v, ver)
                for k, (v, ver) in self._data.items()
                if k.startswith(prefix)
            ]
        matches.sort()
        return matches

    def delete(self, key: str, expected_version: int) -> None:
        with self._lock:
            current = self._data.get(key)
            if current is None:
                raise NotFound(key)
            if current[1] != expected_version:
                raise VersionConflict(
                    f"{key}: expected version {expected_version}, have {current[1]}"
                )
            self._append(key, b"", 0)
            del self._data[key]

    def snapshot(self) -> None:
        """Write a full snapshot so recovery can skip the replayed log prefix."""
        if self._dir is None:
            return
        with self._lock:
            self._log.flush()
            os.fsync(self._log.fileno())
            offset = self._log.tell()
            tmp = self._snap_path + ".tmp"
            try:
                with open(tmp, "wb") as f:
                    f.write(_VER.pack(offset))
                    for key, (value, version) in sorted(self._data.items()):
                        frame = _encode_frame(key, value, version)
                        f.write(_LEN.pack(len(frame)) + frame)
                    f.flush()
                    os.fsync(f.fileno())
                os.replace(tmp, self._snap_path)
            except OSError as e:
                raise StorageFailure(str(e)) from e

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None

    # -- internals --------------------------------------------------------

    def _append(self, key: str, value: bytes, version: int) -> None:
        if self._log is None:
            return
        frame = _encode_frame(key, value, version)
        try:
            self._log.write(_LEN.pack(len(frame)) + frame)
            self._log.flush()
        except OSError as e:
            raise StorageFailure(str(e)) from e
