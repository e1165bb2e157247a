"""Definition-as-code engine: parse declarative files, plan a diff, apply it.

Desired state lives in JSON documents (same canonical agent form as the
registry API, see docs/schema/agent.json) with two extra top-level
sections: `secrets` and `modules`. Modules are reusable harness fragments
(sidecars + secret bindings) expanded purely structurally before diffing;
an agent opts in with `use_modules: [...]`.

plan() computes the minimal create/update/delete action set against a
live snapshot fetched through the gateway, with field-level diffs; secret
values render as "(sensitive)" and drift is detected by value digest, so
no plan output ever contains a secret literal. Every action carries a
version stamp (agent revision / secret digest) and apply() rejects a plan
whose stamps no longer match the live state (StalePlan).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import httpx

from .registry import AgentDefinition

SENSITIVE = "(sensitive)"


class ConfigctlError(Exception):
    pass


class ParseError(ConfigctlError):
    pass


class UnknownModule(ConfigctlError):
    pass


class SchemaError(ConfigctlError):
    pass


class StalePlan(ConfigctlError):
    """Live state moved since the plan was computed; re-plan required."""


class ApplyHalted(ConfigctlError):
    def __init__(self, message: str, report: list):
        super().__init__(message)
        self.report = report


def secret_digest(value: str) -> str:
    return hashlib.sha256(value.encode()).hexdigest()[:16]


@dataclass
class DesiredState:
    agents: dict[str, dict] = field(default_factory=dict)
    secrets: dict[str, str] = field(default_factory=dict)


@dataclass
class Action:
    op: str  # create | update | delete
    kind: str  # agent | secret
    target: str
    diff: dict = field(default_factory=dict)  # field -> {"before": .., "after": ..}
    stamp: Optional[object] = None  # agent revision (int) or secret digest (str)
    blocked: bool = False  # delete without --allow-delete

    def to_doc(self) -> dict:
        return {
            "op": self.op,
            "kind": self.kind,
            "target": self.target,
            "diff": self.diff,
            "stamp": self.stamp,
            "blocked": self.blocked,
        }


@dataclass
class Plan:
    actions: list[Action] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not any(not a.blocked for a in self.actions)

    def to_doc(self) -> dict:
        return {"actions": [a.to_doc() for a in self.actions]}


# ---------------------------------------------------------------------------
# parse
# ---------------------------------------------------------------------------


def parse_paths(paths: list[str]) -> DesiredState:
    docs = []
    for p in sorted(paths):
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                if name.endswith(".json"):
                    docs.append(_load(os.path.join(p, name)))
        else:
            docs.append(_load(p))
    return parse(docs)


def _load(path: str) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    except OSError as e:
        raise ParseError(f"{path}: {e}")
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    doc["__path__"] = path
    return doc


def parse(documents: list[dict]) -> DesiredState:
    modules: dict[str, dict] = {}
    for doc in documents:
        for name, mod in doc.get("modules", {}).items():
            if name in modules:
                raise SchemaError(f"module {name!r} declared twice")
            modules[name] = mod
    state = DesiredState()
    for doc in documents:
        origin = doc.get("__path__", "<inline>")
        for agent_id, agent_doc in doc.get("agents", {}).items():
            if agent_id in state.agents:
                raise SchemaError(f"agent {agent_id!r} declared twice ({origin})")
            state.agents[agent_id] = _expand(agent_id, agent_doc, modules)
        for name, ref in doc.get("secrets", {}).items():
            if name in state.secrets:
                raise SchemaError(f"secret {name!r} declared twice ({origin})")
            state.secrets[name] = _resolve_secret(name, ref)
    for agent_id, agent_doc in state.agents.items():
        _validate_schema(agent_id, agent_doc)
    return state


def _expand(agent_id: str, agent_doc: dict, modules: dict) -> dict:
    doc = json.loads(json.dumps({k: v for k, v in agent_doc.items() if k != "use_modules"}))
    doc["agent_id"] = agent_id
    for name in agent_doc.get("use_modules", []):
        if name not in modules:
            raise UnknownModule(f"agent {agent_id!r} uses undeclared module {name!r}")
        mod = modules[name]
        doc.setdefault("sidecars", []).extend(json.loads(json.dumps(mod.get("sidecars", []))))
        doc.setdefault("secret_bindings", []).extend(
            json.loads(json.dumps(mod.get("secret_bindings", [])))
        )
    return doc


def _resolve_secret(name: str, ref) -> str:
    if isinstance(ref, str):
        return ref
    if isinstance(ref, dict):
        if "literal" in ref:
            return ref["literal"]
        if "env" in ref:
            value = os.environ.get(ref["env"])
            if value is None:
                raise SchemaError(f"secret {name!r}: env var {ref['env']} not set")
            return value
    raise SchemaError(f"secret {name!r}: expected literal or {{env: VAR}}")


_SCHEMA = None


def _validate_schema(agent_id: str, doc: dict) -> None:
    global _SCHEMA
    import jsonschema

    if _SCHEMA is None:
        schema_path = os.path.join(
            os.path.dirname(__file__), "schema", "agent.json"
        )
        with open(schema_path) as f:
            _SCHEMA = json.load(f)
    try:
        jsonschema.validate(doc, _SCHEMA)
    except jsonschema.ValidationError as e:
        raise SchemaError(f"agent {agent_id!r}: {e.message}")


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------


def canonical_agent(doc: dict) -> dict:
    out = AgentDefinition.from_doc(doc).to_doc()
    out.pop("revision", None)
    return out


def compute_plan(
    desired: DesiredState, live_agents: dict[str, dict], live_secrets: dict[str, str],
    allow_delete: bool = False,
) -> Plan:
    """live_agents: agent_id -> definition doc (with revision);
    live_secrets: name -> digest."""
    plan = Plan()
    for name in sorted(desired.secrets):
        want = secret_digest(desired.secrets[name])
        have = live_secrets.get(name)
        if have is None:
            plan.actions.append(
                Action("create", "secret", name,
                       {"value": {"before": None, "after": SENSITIVE}}, stamp=None)
            )
        elif have != want:
            plan.actions.append(
                Action("update", "secret", name,
                       {"value": {"before": SENSITIVE, "after": SENSITIVE}}, stamp=have)
            )
    for agent_id in sorted(desired.agents):
        want = canonical_agent(desired.agents[agent_id])
        have_doc = live_agents.get(agent_id)
        if have_doc is None:
            plan.actions.append(
                Action("create", "agent", agent_id,
                       {k: {"before": None, "after": v} for k, v in want.items() if k != "agent_id"},
                       stamp=0)
            )
            continue
        have = canonical_agent(have_doc)
        diff = {
            k: {"before": have.get(k), "after": want.get(k)}
            for k in sorted(set(have) | set(want))
            if have.get(k) != want.get(k)
        }
        if diff:
            plan.actions.append(
                Action("update", "agent", agent_id, diff, stamp=have_doc.get("revision"))
            )
    for agent_id in sorted(set(live_agents) - set(desired.agents)):
        plan.actions.append(
            Action("delete", "agent", agent_id, {},
                   stamp=live_agents[agent_id].get("revision"),
                   blocked=not allow_delete)
        )
    return plan


# ---------------------------------------------------------------------------
# gateway client + apply
# ---------------------------------------------------------------------------


class GatewayClient:
    def __init__(self, addr: str, token: str, timeout: float = 10.0):
        self._client = httpx.Client(base_url=addr, timeout=timeout)
        self._headers = {"Authorization": f"Bearer {token}"}

    def _req(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        r = self._client.request(method, path, json=body, headers=self._headers)
        if r.status_code >= 400:
            try:
                detail = r.json().get("message", r.text)
            except Exception:
                detail = r.text
            raise ConfigctlError(f"{method} {path} -> {r.status_code}: {detail}")
        return r.json()

    def live_agents(self) -> dict[str, dict]:
        return {d["agent_id"]: d for d in self._req("GET", "/agents")["agents"]}

    def live_secrets(self) -> dict[str, str]:
        return self._req("GET", "/secrets")["secrets"]

    def put_agent(self, agent_id: str, doc: dict) -> int:
        return self._req("PUT", f"/agents/{agent_id}", doc)["revision"]

    def delete_agent(self, agent_id: str) -> None:
        self._req("DELETE", f"/agents/{agent_id}")

    def put_secret(self, name: str, value: str) -> None:
        self._req("POST", "/secrets", {"name": name, "value": value})

    def list_instances(self) -> list[dict]:
        return self._req("GET", "/instances")["instances"]

    def list_identities(self) -> list[dict]:
        return self._req("GET", "/identities")["identities"]

    def write_tuple(self, text: str) -> None:
        self._req("POST", "/tuples", {"tuple": text})

    def check(self, obj: str, relation: str, subject: str) -> bool:
        return self._req(
            "POST", "/check", {"object": obj, "relation": relation, "subject": subject}
        )["allowed"]

    def stream_events(self):
        with self._client.stream(
            "GET", "/events/stream", headers=self._headers, timeout=None
        ) as r:
            event, data = None, None
            for line in r.iter_lines():
                if line.startswith("event: "):
                    event = line[len("event: ") :]
                elif line.startswith("data: "):
                    data = line[len("data: ") :]
                elif line == "" and event is not None:
                    yield event, json.loads(data)
                    event, data = None, None

    def close(self) -> None:
        self._client.close()


def apply_plan(plan: Plan, desired: DesiredState, client: GatewayClient) -> list[dict]:
    """Execute a plan through the gateway, halting at the first failure.

    Stamps are re-validated against the live state first; any mismatch is
    a StalePlan (someone else applied in between).
    """
    live_agents = client.live_agents()
    live_secrets = client.live_secrets()
    for a in plan.actions:
        if a.blocked:
            continue
        if a.kind == "agent":
            current = live_agents.get(a.target, {}).get("revision", 0)
            if current != (a.stamp or 0):
                raise StalePlan(
                    f"agent {a.target}: revision {a.stamp or 0} planned, {current} live"
                )
        else:
            if live_secrets.get(a.target) != a.stamp:
                raise StalePlan(f"secret {a.target}: live value changed since plan")
    report = []
    for a in plan.actions:
        if a.blocked:
            report.append({"action": a.to_doc(), "status": "blocked"})
            continue
        try:
            if a.kind == "secret":
                client.put_secret(a.target, desired.secrets[a.target])
                report.append({"action": a.to_doc(), "status": "applied"})
            elif a.op == "delete":
                client.delete_agent(a.target)
                report.append({"action": a.to_doc(), "status": "applied"})
            else:
                rev = client.put_agent(a.target, canonical_agent(desired.agents[a.target]))
                report.append({"action": a.to_doc(), "status": "applied", "revision": rev})
        except ConfigctlError as e:
            report.append({"action": a.to_doc(), "status": "failed", "error": str(e)})
            raise ApplyHalted(str(e), report)
    return report


def render_plan(plan: Plan) -> str:
    if plan.empty and not plan.actions:
        return "No changes. Desired state matches live state.\n"
    lines = []
    for a in plan.actions:
        marker = {"create": "+", "update": "~", "delete": "-"}[a.op]
        suffix = "  [blocked: use --allow-delete]" if a.blocked else ""
        lines.append(f"{marker} {a.kind} {a.target}{suffix}")
        for fld, d in a.diff.items():
            lines.append(f"    {fld}: {json.dumps(d['before'])} -> {json.dumps(d['after'])}")
    return "\n".join(lines) + "\n"
