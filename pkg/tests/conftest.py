import sys
import os

import httpx
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from agynlite.platform import Platform, PlatformConfig

USERS = {
    "admin-token": {"user": "user:root", "admin": True},
    "alice-token": {"user": "user:alice"},
    "bob-token": {"user": "user:bob"},
    "carol-token": {"user": "user:carol"},
}


def make_platform(tmp_path, **overrides) -> Platform:
    cfg = PlatformConfig(
        data_dir=str(tmp_path / "data"),
        users=dict(USERS),
        master_key_hex="ab" * 32,
        sweep_period_s=0.5,
        redelivery_timeout_s=2.0,
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return Platform(cfg)


@pytest.fixture
def platform(tmp_path):
    p = make_platform(tmp_path)
    p.start()
    yield p
    p.stop()


class Client:
    """Thin httpx wrapper bound to one bearer token or identity token."""

    def __init__(self, base_url, token=None, identity_token=None):
        headers = {}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        if identity_token:
            headers["X-Agyn-Identity-Token"] = identity_token
        self._c = httpx.Client(base_url=base_url, headers=headers, timeout=10.0)

    def req(self, method, path, body=None, headers=None):
        return self._c.request(method, path, json=body, headers=headers)

    def get(self, path, **kw):
        return self.req("GET", path, **kw)

    def post(self, path, body=None, **kw):
        return self.req("POST", path, body, **kw)

    def put(self, path, body=None, **kw):
        return self.req("PUT", path, body, **kw)

    def delete(self, path, body=None, **kw):
        return self.req("DELETE", path, body, **kw)

    def stream(self, path):
        return self._c.stream("GET", path, timeout=10.0)

    def close(self):
        self._c.close()


@pytest.fixture
def clients(platform):
    made = []

    def make(token=None, identity_token=None):
        c = Client(platform.base_url, token, identity_token)
        made.append(c)
        return c

    yield make
    for c in made:
        c.close()


ECHO_AGENT_DOC = {
    "system_prompt": "you echo",
    "model": "test-model",
    "main_container": {"name": "main", "image_or_behavior": "echo-agent"},
    "sidecars": [],
    "secret_bindings": [],
    "volumes": [{"name": "ws", "mount_path": "/ws"}],
    "idle_timeout_s": 5,
    "keepalive_interval_s": 1,
}
