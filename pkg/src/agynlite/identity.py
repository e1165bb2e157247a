"""Overlay identity provider: signed credentials, lifecycle classes, lease GC.

Three lifecycle classes coexist:
  - ephemeral workload identities: created at instance spawn, deleted at stop
  - ephemeral service identities: self-enrolled, kept alive by lease renewal,
    collected by gc_sweep once the lease expires
  - persistent identities: provisioned with a service token, never collected

Credentials are detached-signature tokens over a canonical serialization of
(identity_id, class, subject, attributes, created_ts):
base64url(body) "." base64url(signature). Verification checks the platform
signing key and a persisted revocation set, so deletion takes effect
immediately even while the workload is still stopping.
"""

from __future__ import annotations

import base64
import hmac
import json
import secrets
import threading
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .clock import Clock, SystemClock
from .events import EventBus
from .store import Store, VersionConflict

CLASS_WORKLOAD = "ephemeral-workload"
CLASS_SERVICE = "ephemeral-service"
CLASS_PERSISTENT = "persistent"

DEFAULT_SERVICE_TTL_S = 30


class IdentityError(Exception):
    pass


class DuplicateIdentity(IdentityError):
    pass


class IdentityNotFound(IdentityError):
    pass


class LeaseGone(IdentityError):
    """Lease already collected; the holder must re-enroll."""


class BadToken(IdentityError):
    """Provisioning service token mismatch."""


class InvalidCredential(IdentityError):
    """Credential is malformed, forged, or revoked."""


@dataclass
class Identity:
    identity_id: str
    identity_class: str
    subject: str
    attributes: dict
    credential: str
    created_ts: int
    lease_id: Optional[str] = None

    def to_doc(self) -> dict:
        return {
            "identity_id": self.identity_id,
            "identity_class": self.identity_class,
            "subject": self.subject,
            "attributes": self.attributes,
            "credential": self.credential,
            "created_ts": self.created_ts,
            "lease_id": self.lease_id,
        }

    @staticmethod
    def from_doc(doc: dict) -> "Identity":
        return Identity(**doc)


@dataclass
class Lease:
    lease_id: str
    identity_id: str
    expires_ts: int
    ttl_s: int


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(data: str) -> bytes:
    pad = "=" * (-len(data) % 4)
    return base64.urlsafe_b64decode(data + pad)


class IdentityProvider:
    """Mints, verifies, revokes, and garbage-collects overlay identities."""

    def __init__(
        self,
        store: Store,
        bus: Optional[EventBus] = None,
        clock: Optional[Clock] = None,
        provisioning_token: Optional[str] = None,
    ):
        self._store = store
        self._bus = bus
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._provisioning_token = provisioning_token or secrets.token_hex(16)
        self._key = self._load_or_create_key()
        self._pub: Ed25519PublicKey = self._key.public_key()

    @property
    def provisioning_token(self) -> str:
        return self._provisioning_token

    # -- minting ----------------------------------------------------------

    def mint_workload_identity(
        self, instance_id: str, agent_id: str, thread_id: str
    ) -> Identity:
        with self._lock:
            idx_key = f"identity/by-instance/{instance_id}"
            if self._store.get_or_none(idx_key) is not None:
                raise DuplicateIdentity(instance_id)
            ident = self._mint(
                CLASS_WORKLOAD,
                subject=instance_id,
                attributes={"agent_id": agent_id, "thread_id": thread_id},
            )
            self._store.put(idx_key, ident.identity_id.encode())
        self._publish("minted", ident)
        return ident

    def enroll_service_identity(
        self, service_name: str, ttl_s: int = DEFAULT_SERVICE_TTL_S, now: Optional[int] = None
    ) -> tuple[Identity, Lease]:
        if ttl_s <= 0:
            raise ValueError("ttl_s must be positive")
        now = self._clock.now_ms() if now is None else now
        with self._lock:
            lease_id = f"lease-{secrets.token_hex(6)}"
            ident = self._mint(
                CLASS_SERVICE,
                subject=service_name,
                attributes={"service": service_name},
                lease_id=lease_id,
            )
            lease = Lease(lease_id, ident.identity_id, now + ttl_s * 1000, ttl_s)
            self._put_lease(lease)
        self._publish("minted", ident)
        return ident, lease

    def provision_persistent(self, name: str, service_token: str) -> Identity:
        if not hmac.compare_digest(service_token, self._provisioning_token):
            raise BadToken(name)
        with self._lock:
            ident = self._mint(
                CLASS_PERSISTENT, subject=name, attributes={"name": name}
            )
        self._publish("minted", ident)
        return ident

    # -- lifecycle --------------------------------------------------------

    def delete_identity(self, identity_id: str) -> None:
        with self._lock:
            rec = self._store.get_or_none(f"identity/rec/{identity_id}")
            if rec is None:
                raise IdentityNotFound(identity_id)
            ident = Identity.from_doc(json.loads(rec[0]))
            self._store.put(f"identity/revoked/{identity_id}", b"1")
            self._store.delete(f"identity/rec/{identity_id}", rec[1])
            if ident.identity_class == CLASS_WORKLOAD:
                idx = self._store.get_or_none(f"identity/by-instance/{ident.subject}")
                if idx is not None:
                    self._store.delete(f"identity/by-instance/{ident.subject}", idx[1])
            if ident.lease_id:
                lrec = self._store.get_or_none(f"lease/{ident.lease_id}")
                if lrec is not None:
                    self._store.delete(f"lease/{ident.lease_id}", lrec[1])
        self._publish("deleted", ident)

    def renew_lease(self, lease_id: str, now: Optional[int] = None) -> int:
        now = self._clock.now_ms() if now is None else now
        with self._lock:
            rec = self._store.get_or_none(f"lease/{lease_id}")
            if rec is None:
                raise LeaseGone(lease_id)
            doc = json.loads(rec[0])
            # monotonic: a stale clock can never shorten the lease
            new_expiry = max(doc["expires_ts"], now + doc["ttl_s"] * 1000)
            doc["expires_ts"] = new_expiry
            self._store.put(f"lease/{lease_id}", json.dumps(doc).encode(), rec[1])
            return new_expiry

    def gc_sweep(self, now: Optional[int] = None) -> list[str]:
        """Delete every service identity whose lease has expired.

        Workload identities (instance-lifecycle bound) and persistent
        identities are never touched by this sweep.
        """
        now = self._clock.now_ms() if now is None else now
        deleted = []
        for key, value, _ in self._store.scan("lease/"):
            doc = json.loads(value)
            if doc["expires_ts"] < now:
                try:
                    self.delete_identity(doc["identity_id"])
                    deleted.append(doc["identity_id"])
                except IdentityNotFound:
                    pass
        return deleted

    # -- queries ----------------------------------------------------------

    def verify(self, credential: str) -> Identity:
        """Authenticate a credential; raises InvalidCredential on any defect."""
        try:
            body_b64, sig_b64 = credential.split(".")
            body = _unb64(body_b64)
            sig = _unb64(sig_b64)
            self._pub.verify(sig, body)
            doc = json.loads(body)
            identity_id = doc["identity_id"]
        except (ValueError, KeyError, InvalidSignature, json.JSONDecodeError):
            raise InvalidCredential("malformed or forged credential")
        if self._store.get_or_none(f"identity/revoked/{identity_id}") is not None:
            raise InvalidCredential(f"revoked: {identity_id}")
        rec = self._store.get_or_none(f"identity/rec/{identity_id}")
        if rec is None:
            raise InvalidCredential(f"unknown identity: {identity_id}")
        return Identity.from_doc(json.loads(rec[0]))

    def get(self, identity_id: str) -> Identity:
        rec = self._store.get_or_none(f"identity/rec/{identity_id}")
        if rec is None:
            raise IdentityNotFound(identity_id)
        return Identity.from_doc(json.loads(rec[0]))

    def get_by_instance(self, instance_id: str) -> Optional[Identity]:
        idx = self._store.get_or_none(f"identity/by-instance/{instance_id}")
        if idx is None:
            return None
        rec = self._store.get_or_none(f"identity/rec/{idx[0].decode()}")
        return Identity.from_doc(json.loads(rec[0])) if rec else None

    def list_identities(self) -> list[Identity]:
        return [
            Identity.from_doc(json.loads(v))
            for _, v, _ in self._store.scan("identity/rec/")
        ]

    def get_lease(self, lease_id: str) -> Optional[Lease]:
        rec = self._store.get_or_none(f"lease/{lease_id}")
        if rec is None:
            return None
        doc = json.loads(rec[0])
        return Lease(**doc)

    # -- internals --------------------------------------------------------

    def _mint(
        self,
        identity_class: str,
        subject: str,
        attributes: dict,
        lease_id: Optional[str] = None,
    ) -> Identity:
        identity_id = f"id-{secrets.token_hex(8)}"
        created_ts = self._clock.now_ms()
        body = json.dumps(
            {
                "identity_id": identity_id,
                "identity_class": identity_class,
                "subject": subject,
                "attributes": attributes,
                "created_ts": created_ts,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        sig = self._key.sign(body)
        credential = f"{_b64(body)}.{_b64(sig)}"
        ident = Identity(
            identity_id=identity_id,
            identity_class=identity_class,
            subject=subject,
            attributes=attributes,
            credential=credential,
            created_ts=created_ts,
            lease_id=lease_id,
        )
        self._store.put(
            f"identity/rec/{identity_id}", json.dumps(ident.to_doc()).encode()
        )
        return ident

    def _put_lease(self, lease: Lease) -> None:
        doc = {
            "lease_id": lease.lease_id,
            "identity_id": lease.identity_id,
            "expires_ts": lease.expires_ts,
            "ttl_s": lease.ttl_s,
        }
        rec = self._store.get_or_none(f"lease/{lease.lease_id}")
        self._store.put(
            f"lease/{lease.lease_id}",
            json.dumps(doc).encode(),
            rec[1] if rec else 0,
        )

    def _publish(self, action: str, ident: Identity) -> None:
        if self._bus is None:
            return
        self._bus.publish(
            "identity.change",
            {
                "action": action,
                "identity_id": ident.identity_id,
                "identity_class": ident.identity_class,
                "subject": ident.subject,
            },
        )

    def _load_or_create_key(self) -> Ed25519PrivateKey:
        rec = self._store.get_or_none("identity/signing-key")
        if rec is not None:
            return Ed25519PrivateKey.from_private_bytes(rec[0])
        key = Ed25519PrivateKey.generate()
        from cryptography.hazmat.primitives import serialization

        raw = key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        self._store.put("identity/signing-key", raw)
        return key
