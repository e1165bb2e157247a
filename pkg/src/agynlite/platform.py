"""Wires every subsystem into one runnable control plane.

One Platform owns the store, event bus, identity provider, registry,
authz, thread service, orchestrator, simulated runner, and the gateway
HTTP server. Agent behaviors reach the platform the same way external
clients do: over HTTP through the gateway, authenticated with their
workload identity token via the network proxy.
"""

from __future__ import annotations

import os
import ssl
import threading
from dataclasses import dataclass, field
from typing import Optional

import httpx

from .authz import Authz
from .clock import Clock, SystemClock
from .events import DEFAULT_REDELIVERY_TIMEOUT_S, EventBus
from .gateway import Gateway, GatewayServer, IDENTITY_TOKEN_HEADER
from .identity import IdentityProvider
from .orchestrator import Orchestrator
from .registry import Registry, load_master_key
from .runner import SimulatedRunner
from .store import Store
from .threads import ThreadService


@dataclass
class PlatformConfig:
    data_dir: str
    users: dict = field(default_factory=dict)  # token -> {"user": .., "admin": bool}
    master_key_hex: Optional[str] = None
    provisioning_token: Optional[str] = None
    sweep_period_s: Optional[float] = None
    redelivery_timeout_s: float = DEFAULT_REDELIVERY_TIMEOUT_S
    host: str = "127.0.0.1"
    port: int = 0
    console_dir: Optional[str] = None


# building an SSL context dominates httpx.Client construction (~40 ms of
# CPU); every proxy talks plain HTTP to the local gateway, so one shared
# context serves them all
_SHARED_SSL_CONTEXT = ssl.create_default_context()


class HttpProxy:
    """Workload-scoped network access: attaches the identity token that
    lives in the workload's proxy scope, never in container env."""

    def __init__(self, base_url_fn, token: str):
        self._base_url_fn = base_url_fn
        self._token = token
        self._client: Optional[httpx.Client] = None
        self._client_lock = threading.Lock()

    def _get_client(self) -> httpx.Client:
        # one pooled client per workload; building a transport per request
        # is far too expensive for a 1 Hz keep-alive times N instances
        with self._client_lock:
            if self._client is None:
                self._client = httpx.Client(
                    base_url=self._base_url_fn(),
                    headers={IDENTITY_TOKEN_HEADER: self._token},
                    timeout=10.0,
                    verify=_SHARED_SSL_CONTEXT,
                )
            return self._client

    def _request(self, method: str, path: str, body: Optional[dict]) -> dict:
        r = self._get_client().request(method, path, json=body)
        r.raise_for_status()
        return r.json()

    def post(self, path: str, body: dict) -> dict:
        return self._request("POST", path, body)

    def get(self, path: str) -> dict:
        return self._request("GET", path, None)


class Platform:
    def __init__(self, config: PlatformConfig, clock: Optional[Clock] = None):
        self.config = config
        self.clock = clock or SystemClock()
        os.makedirs(config.data_dir, exist_ok=True)
        self.store = Store(os.path.join(config.data_dir, "store"))
        self.bus = EventBus(
            self.store, self.clock, redelivery_timeout_s=config.redelivery_timeout_s
        )
        self.identity = IdentityProvider(
            self.store, self.bus, self.clock, provisioning_token=config.provisioning_token
        )
        self.registry = Registry(
            self.store, self.bus, master_key=load_master_key(config.master_key_hex)
        )
        self.authz = Authz(self.store)
        self.threads = ThreadService(self.store, self.bus, self.clock)
        self.runner = SimulatedRunner(
            os.path.join(config.data_dir, "runner"),
            clock=self.clock,
            proxy_factory=lambda token: HttpProxy(lambda: self.base_url, token),
        )
        self.orchestrator = Orchestrator(
            self.store,
            self.bus,
            self.registry,
            self.identity,
            self.runner,
            self.threads,
            self.clock,
            sweep_period_s=config.sweep_period_s,
        )
        self.gateway = Gateway(
            self.threads,
            self.registry,
            self.orchestrator,
            self.identity,
            self.authz,
            self.bus,
            users=config.users,
            console_dir=config.console_dir,
        )
        self.server = GatewayServer(self.gateway, config.host, config.port)

    @property
    def base_url(self) -> str:
        return self.server.base_url

    def start(self) -> None:
        self.orchestrator.recover(self.runner.list_workloads())
        self.server.start()
        self.orchestrator.start()

    def stop(self) -> None:
        self.orchestrator.stop()
        for wid in self.runner.list_workloads():
            try:
                self.runner.stop_workload(wid)
            except Exception:
                pass
        self.server.stop()
        self.store.snapshot()
        self.store.close()
