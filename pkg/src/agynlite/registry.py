"""Agents service: versioned agent definitions, sealed secrets, harness resolution.

An agent definition is the declarative unit (prompt, model, containers,
secret bindings, volumes); every accepted update bumps its revision and
publishes `config.applied`. Running instances are never touched: they
keep the revision they spawned from, and the next spawn picks up the
latest.

Secrets are sealed at rest with AES-GCM under the platform master key
(AGYNLITE_MASTER_KEY, 32 bytes hex). They are write-only through every
read API; only resolve_harness materializes values, and only into the
env maps of the containers their bindings name.
"""

from __future__ import annotations

import hashlib
import json
import os
import secrets as _secrets
import threading
from dataclasses import dataclass, field
from typing import Optional

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .events import EventBus
from .store import Store, NotFound as StoreNotFound, VersionConflict

DEFAULT_IDLE_TIMEOUT_S = 300
DEFAULT_KEEPALIVE_INTERVAL_S = 10

MASTER_KEY_ENV = "AGYNLITE_MASTER_KEY"


class RegistryError(Exception):
    pass


class ValidationError(RegistryError):
    pass


class AgentNotFound(RegistryError):
    pass


class UnresolvedSecret(RegistryError):
    """A binding names a secret that is not stored."""

    def __init__(self, secret_name: str):
        super().__init__(secret_name)
        self.secret_name = secret_name


@dataclass
class ContainerSpec:
    name: str
    image_or_behavior: str
    env: dict = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {"name": self.name, "image_or_behavior": self.image_or_behavior, "env": dict(self.env)}

    @staticmethod
    def from_doc(doc: dict) -> "ContainerSpec":
        return ContainerSpec(doc["name"], doc["image_or_behavior"], dict(doc.get("env", {})))


@dataclass
class VolumeSpec:
    name: str
    mount_path: str

    def to_doc(self) -> dict:
        return {"name": self.name, "mount_path": self.mount_path}

    @staticmethod
    def from_doc(doc: dict) -> "VolumeSpec":
        return VolumeSpec(doc["name"], doc["mount_path"])


@dataclass
class SecretBinding:
    secret_name: str
    target_container: str
    env_var: str

    def to_doc(self) -> dict:
        return {
            "secret_name": self.secret_name,
            "target_container": self.target_container,
            "env_var": self.env_var,
        }

    @staticmethod
    def from_doc(doc: dict) -> "SecretBinding":
        return SecretBinding(doc["secret_name"], doc["target_container"], doc["env_var"])


@dataclass
class AgentDefinition:
    agent_id: str
    system_prompt: str
    model: str
    main_container: ContainerSpec
    sidecars: list[ContainerSpec] = field(default_factory=list)
    secret_bindings: list[SecretBinding] = field(default_factory=list)
    volumes: list[VolumeSpec] = field(default_factory=list)
    idle_timeout_s: int = DEFAULT_IDLE_TIMEOUT_S
    keepalive_interval_s: int = DEFAULT_KEEPALIVE_INTERVAL_S
    revision: int = 0

    def container_names(self) -> list[str]:
        return [self.main_container.name] + [c.name for c in self.sidecars]

    def to_doc(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "revision": self.revision,
            "system_prompt": self.system_prompt,
            "model": self.model,
            "main_container": self.main_container.to_doc(),
            "sidecars": [c.to_doc() for c in self.sidecars],
            "secret_bindings": [b.to_doc() for b in self.secret_bindings],
            "volumes": [v.to_doc() for v in self.volumes],
            "idle_timeout_s": self.idle_timeout_s,
            "keepalive_interval_s": self.keepalive_interval_s,
        }

    @staticmethod
    def from_doc(doc: dict) -> "AgentDefinition":
        return AgentDefinition(
            agent_id=doc["agent_id"],
            system_prompt=doc.get("system_prompt", ""),
            model=doc.get("model", ""),
            main_container=ContainerSpec.from_doc(doc["main_container"]),
            sidecars=[ContainerSpec.from_doc(c) for c in doc.get("sidecars", [])],
            secret_bindings=[SecretBinding.from_doc(b) for b in doc.get("secret_bindings", [])],
            volumes=[VolumeSpec.from_doc(v) for v in doc.get("volumes", [])],
            idle_timeout_s=doc.get("idle_timeout_s", DEFAULT_IDLE_TIMEOUT_S),
            keepalive_interval_s=doc.get("keepalive_interval_s", DEFAULT_KEEPALIVE_INTERVAL_S),
            revision=doc.get("revision", 0),
        )


@dataclass
class ResolvedHarness:
    """Spawn-ready snapshot: definition fields + per-container env with
    secret values materialized into exactly their bound containers."""

    agent_id: str
    revision: int
    system_prompt: str
    model: str
    containers: list[ContainerSpec]  # containers[0] is main
    volumes: list[VolumeSpec]
    idle_timeout_s: int
    keepalive_interval_s: int


def load_master_key(hex_key: Optional[str] = None) -> bytes:
    raw = hex_key if hex_key is not None else os.environ.get(MASTER_KEY_ENV)
    if raw is None:
        # ephemeral key: fine for tests and throwaway runs, sealed data
        # will not survive a restart without the env var
        return _secrets.token_bytes(32)
    key = bytes.fromhex(raw)
    if len(key) != 32:
        raise ValueError(f"{MASTER_KEY_ENV} must be 32 bytes of hex")
    return key


class Registry:
    """Stores definitions and secrets; resolves spawn-ready harnesses."""

    def __init__(self, store: Store, bus: Optional[EventBus] = None, master_key: Optional[bytes] = None):
        self._store = store
        self._bus = bus
        self._key = master_key if master_key is not None else load_master_key()
        self._lock = threading.Lock()

    # -- definitions ------------------------------------------------------

    def put_definition(self, definition: AgentDefinition) -> int:
        self._validate(definition)
        agent_id = definition.agent_id
        with self._lock:
            while True:
                meta = self._store.get_or_none(f"agent/{agent_id}/meta")
                latest = int(meta[0]) if meta else 0
                revision = latest + 1
                definition.revision = revision
                self._store.put(
                    f"agent/{agent_id}/rev/{revision:08d}",
                    json.dumps(definition.to_doc()).encode(),
                )
                try:
                    self._store.put(
                        f"agent/{agent_id}/meta",
                        str(revision).encode(),
                        meta[1] if meta else 0,
                    )
                    break
                except VersionConflict:
                    continue
        if self._bus is not None:
            self._bus.publish(
                "config.applied", {"agent_id": agent_id, "revision": revision, "action": "put"}
            )
        return revision

    def get_definition(self, agent_id: str, revision: Optional[int] = None) -> AgentDefinition:
        meta = self._store.get_or_none(f"agent/{agent_id}/meta")
        if meta is None or int(meta[0]) == 0:
            raise AgentNotFound(agent_id)
        rev = revision if revision is not None else int(meta[0])
        rec = self._store.get_or_none(f"agent/{agent_id}/rev/{rev:08d}")
        if rec is None:
            raise AgentNotFound(f"{agent_id}@{rev}")
        return AgentDefinition.from_doc(json.loads(rec[0]))

    def delete_definition(self, agent_id: str) -> None:
        with self._lock:
            meta = self._store.get_or_none(f"agent/{agent_id}/meta")
            if meta is None or int(meta[0]) == 0:
                raise AgentNotFound(agent_id)
            for key, _, ver in self._store.scan(f"agent/{agent_id}/rev/"):
                self._store.delete(key, ver)
            self._store.put(f"agent/{agent_id}/meta", b"0", meta[1])
        if self._bus is not None:
            self._bus.publish(
                "config.applied", {"agent_id": agent_id, "revision": 0, "action": "delete"}
            )

    def list_agents(self) -> list[AgentDefinition]:
        out = []
        for key, value, _ in self._store.scan("agent/"):
            if key.endswith("/meta") and int(value) > 0:
                agent_id = key[len("agent/") : -len("/meta")]
                out.append(self.get_definition(agent_id))
        return out

    # -- secrets ----------------------------------------------------------

    def put_secret(self, name: str, value: bytes) -> None:
        if not name:
            raise ValidationError("secret name must be non-empty")
        nonce = _secrets.token_bytes(12)
        sealed = nonce + AESGCM(self._key).encrypt(nonce, value, name.encode())
        # unkeyed digest so configctl can compute drift client-side
        fp = hashlib.sha256(value).hexdigest()[:16]
        doc = {"sealed": sealed.hex(), "fingerprint": fp}
        with self._lock:
            rec = self._store.get_or_none(f"secret/{name}")
            self._store.put(f"secret/{name}", json.dumps(doc).encode(), rec[1] if rec else 0)

    def delete_secret(self, name: str) -> None:
        with self._lock:
            rec = self._store.get_or_none(f"secret/{name}")
            if rec is None:
                raise StoreNotFound(name)
            self._store.delete(f"secret/{name}", rec[1])

    def list_secrets(self) -> dict[str, str]:
        """Names and keyed fingerprints only; values never leave resolve_harness."""
        out = {}
        for key, value, _ in self._store.scan("secret/"):
            doc = json.loads(value)
            out[key[len("secret/") :]] = doc["fingerprint"]
        return out

    def _open_secret(self, name: str) -> bytes:
        rec = self._store.get_or_none(f"secret/{name}")
        if rec is None:
            raise UnresolvedSecret(name)
        sealed = bytes.fromhex(json.loads(rec[0])["sealed"])
        return AESGCM(self._key).decrypt(sealed[:12], sealed[12:], name.encode())

    # -- resolution -------------------------------------------------------

    def resolve_harness(self, agent_id: str) -> ResolvedHarness:
        """Pin the latest definition and materialize secrets into exactly
        the containers their bindings target."""
        d = self.get_definition(agent_id)
        containers = [ContainerSpec(c.name, c.image_or_behavior, dict(c.env))
                      for c in [d.main_container] + d.sidecars]
        by_name = {c.name: c for c in containers}
        for b in d.secret_bindings:
            value = self._open_secret(b.secret_name)
            by_name[b.target_container].env[b.env_var] = value.decode("utf-8", "surrogateescape")
        return ResolvedHarness(
            agent_id=d.agent_id,
            revision=d.revision,
            system_prompt=d.system_prompt,
            model=d.model,
            containers=containers,
            volumes=list(d.volumes),
            idle_timeout_s=d.idle_timeout_s,
            keepalive_interval_s=d.keepalive_interval_s,
        )

    # -- validation -------------------------------------------------------

    def _validate(self, d: AgentDefinition) -> None:
        names = d.container_names()
        if len(names) != len(set(names)):
            raise ValidationError(f"duplicate container names in {d.agent_id}")
        paths = [v.mount_path for v in d.volumes]
        if len(paths) != len(set(paths)):
            raise ValidationError(f"duplicate mount paths in {d.agent_id}")
        vol_names = [v.name for v in d.volumes]
        if len(vol_names) != len(set(vol_names)):
            raise ValidationError(f"duplicate volume names in {d.agent_id}")
        for b in d.secret_bindings:
            if b.target_container not in names:
                raise ValidationError(
                    f"binding {b.secret_name!r} targets undeclared container {b.target_container!r}"
                )
