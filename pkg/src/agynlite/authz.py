"""Two-layer authorization: ABAC dial policies and ReBAC relation checks.

The dial layer answers "may this identity reach this service" from
attribute-selector policies; with no matching policy the answer is false
(deny by default).

The relation layer answers "does this subject hold this relation or
permission on this object" by graph traversal over stored tuples under a
fixed rewrite schema:

    agent:  owner (direct)
            maintainer  = direct ∪ owner
            participant = direct ∪ maintainer
    thread: participant = direct

    permissions: agent.configure -> maintainer, agent.delete -> owner,
                 agent.create_thread -> participant,
                 thread.read / thread.post -> participant

Tuples may carry userset subjects ("agent:a#maintainer"), expanded
recursively with memoization, a visited set for cycles, and a hard depth
limit that raises rather than silently denying.

Tuple textual form: object#relation@subject
(e.g. agent:a#owner@user:alice, thread:t1#participant@agent:a#maintainer).
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass

from .store import Store, VersionConflict

DEFAULT_DEPTH_LIMIT = 16

# relation -> relations it additionally inherits from, per object type
SCHEMA: dict[str, dict] = {
    "agent": {
        "relations": {
            "owner": (),
            "maintainer": ("owner",),
            "participant": ("maintainer",),
        },
        "permissions": {
            "configure": "maintainer",
            "delete": "owner",
            "create_thread": "participant",
        },
    },
    "thread": {
        "relations": {"participant": ()},
        "permissions": {"read": "participant", "post": "participant"},
    },
}


class AuthzError(Exception):
    pass


class SchemaViolation(AuthzError):
    pass


class DepthExceeded(AuthzError):
    """Userset expansion exceeded the depth limit (likely a cyclic graph)."""


@dataclass(frozen=True)
class RelationTuple:
    object: str  # "type:id"
    relation: str
    subject: str  # "user:x", "agent:x", or userset "type:id#relation"

    def text(self) -> str:
        return f"{self.object}#{self.relation}@{self.subject}"

    @staticmethod
    def parse(text: str) -> "RelationTuple":
        obj_rel, _, subject = text.partition("@")
        obj, _, relation = obj_rel.partition("#")
        if not obj or not relation or not subject:
            raise SchemaViolation(f"malformed tuple: {text!r}")
        return RelationTuple(obj, relation, subject)


def _object_type(obj: str) -> str:
    typ, sep, rest = obj.partition(":")
    if not sep or not rest:
        raise SchemaViolation(f"malformed object id: {obj!r}")
    return typ


def _validate(t: RelationTuple) -> None:
    typ = _object_type(t.object)
    if typ not in SCHEMA:
        raise SchemaViolation(f"unknown object type: {typ}")
    if t.relation not in SCHEMA[typ]["relations"]:
        raise SchemaViolation(f"relation {t.relation!r} not declared for {typ}")
    if "#" in t.subject:
        sobj, _, srel = t.subject.partition("#")
        styp = _object_type(sobj)
        if styp not in SCHEMA or srel not in SCHEMA[styp]["relations"]:
            raise SchemaViolation(f"invalid userset subject: {t.subject!r}")
    else:
        _object_type(t.subject)  # must at least be "type:id" shaped


def resolve_relation(object_type: str, name: str) -> str:
    """Map a permission name to its backing relation; relations pass through."""
    if object_type not in SCHEMA:
        raise SchemaViolation(f"unknown object type: {object_type}")
    spec = SCHEMA[object_type]
    if name in spec["relations"]:
        return name
    if name in spec["permissions"]:
        return spec["permissions"][name]
    raise SchemaViolation(f"{name!r} is not a relation or permission of {object_type}")


class Authz:
    """Tuple store + check engine + dial-policy evaluator."""

    def __init__(self, store: Store):
        self._store = store
        self._lock = threading.Lock()

    # -- tuples -----------------------------------------------------------

    def write_tuple(self, t: RelationTuple) -> None:
        _validate(t)
        key = f"tuple/{t.text()}"
        with self._lock:
            if self._store.get_or_none(key) is None:
                self._store.put(key, b"1")

    def delete_tuple(self, t: RelationTuple) -> None:
        _validate(t)
        key = f"tuple/{t.text()}"
        with self._lock:
            rec = self._store.get_or_none(key)
            if rec is not None:
                self._store.delete(key, rec[1])

    def list_tuples(self) -> list[RelationTuple]:
        return [
            RelationTuple.parse(k[len("tuple/") :])
            for k, _, _ in self._store.scan("tuple/")
        ]

    def grant_defaults_on_thread_create(
        self, thread_id: str, creator: str, agent_id: str
    ) -> list[RelationTuple]:
        """Creator and serving agent both become thread participants."""
        written = [
            RelationTuple(f"thread:{thread_id}", "participant", creator),
            RelationTuple(f"thread:{thread_id}", "participant", f"agent:{agent_id}"),
        ]
        for t in written:
            self.write_tuple(t)
        return written

    # -- check ------------------------------------------------------------

    def check(
        self,
        obj: str,
        name: str,
        subject: str,
        depth_limit: int = DEFAULT_DEPTH_LIMIT,
    ) -> bool:
        typ = _object_type(obj)
        relation = resolve_relation(typ, name)
        tuples = self.list_tuples()  # one scan = consistent snapshot
        memo: dict[tuple[str, str, str], bool] = {}
        return _eval(obj, relation, subject, tuples, memo, set(), 0, depth_limit)

    # -- dial policies ----------------------------------------------------

    def put_policy(self, policy_id: str, selector: dict, services: list[str]) -> None:
        doc = json.dumps({"selector": selector, "services": sorted(services)}).encode()
        with self._lock:
            rec = self._store.get_or_none(f"policy/{policy_id}")
            self._store.put(f"policy/{policy_id}", doc, rec[1] if rec else 0)

    def delete_policy(self, policy_id: str) -> None:
        with self._lock:
            rec = self._store.get_or_none(f"policy/{policy_id}")
            if rec is not None:
                self._store.delete(f"policy/{policy_id}", rec[1])

    def list_policies(self) -> dict[str, dict]:
        return {
            k[len("policy/") :]: json.loads(v)
            for k, v, _ in self._store.scan("policy/")
        }

    def dial_allowed(self, attributes: dict, service: str) -> bool:
        """True iff some policy's selector matches and names the service.

        Selectors are conjunctions of attribute=value terms; no policy
        means no dial.
        """
        for _, v, _ in self._store.scan("policy/"):
            doc = json.loads(v)
            if service not in doc["services"]:
                continue
            if all(attributes.get(k) == want for k, want in doc["selector"].items()):
                return True
        return False


def _eval(
    obj: str,
    relation: str,
    subject: str,
    tuples: list[RelationTuple],
    memo: dict,
    in_progress: set,
    depth: int,
    depth_limit: int,
) -> bool:
    if depth > depth_limit:
        raise DepthExceeded(f"{obj}#{relation}@{subject} at depth {depth}")
    key = (obj, relation, subject)
    if key in memo:
        return memo[key]
    if key in in_progress:
        return False  # cycle: least fixpoint gives false on this branch
    in_progress.add(key)
    try:
        typ = _object_type(obj)
        # rewrite closure: this relation plus everything that implies it
        frontier = {relation}
        rels = SCHEMA[typ]["relations"]
        changed = True
        while changed:
            changed = False
            for r in list(frontier):
                for implied in rels.get(r, ()):
                    if implied not in frontier:
                        frontier.add(implied)
                        changed = True
        result = False
        for t in tuples:
            if t.object != obj or t.relation not in frontier:
                continue
            if t.subject == subject:
                result = True
                break
            if "#" in t.subject:
                sobj, _, srel = t.subject.partition("#")
                if _eval(
                    sobj, srel, subject, tuples, memo, in_progress, depth + 1, depth_limit
                ):
                    result = True
                    break
        if result:
            # only True is safe to memoize: a False computed under a cycle
            # assumption may not hold for other query paths
            memo[key] = True
        return result
    finally:
        in_progress.discard(key)
