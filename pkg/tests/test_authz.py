import random

import pytest

from agynlite.authz import (
    Authz,
    DepthExceeded,
    RelationTuple,
    SchemaViolation,
)
from agynlite.store import Store

from rebac_oracle import oracle_check


@pytest.fixture
def authz():
    return Authz(Store())


def T(text):
    return RelationTuple.parse(text)


# -- tuple CRUD -------------------------------------------------------------


def test_write_then_check(authz):
    authz.write_tuple(T("agent:a#owner@user:alice"))
    assert authz.check("agent:a", "owner", "user:alice")


def test_undeclared_relation_rejected(authz):
    with pytest.raises(SchemaViolation):
        authz.write_tuple(T("agent:a#boss@user:alice"))


def test_delete_then_check_false(authz):
    t = T("agent:a#owner@user:alice")
    authz.write_tuple(t)
    authz.delete_tuple(t)
    assert not authz.check("agent:a", "owner", "user:alice")


def test_tuple_text_round_trip():
    for text in (
        "agent:a#owner@user:alice",
        "thread:t1#participant@agent:a#maintainer",
    ):
        assert RelationTuple.parse(text).text() == text


# -- check -------------------------------------------------------------------


def test_owner_implies_participant(authz):
    authz.write_tuple(T("agent:a#owner@user:alice"))
    assert authz.check("agent:a", "participant", "user:alice")


def test_userset_subject_expansion(authz):
    authz.write_tuple(T("thread:t1#participant@agent:a#maintainer"))
    authz.write_tuple(T("agent:a#owner@user:bob"))
    # oracle agrees: bob is owner -> maintainer of agent:a -> t1 participant
    tuples = authz.list_tuples()
    assert oracle_check(tuples, "thread:t1", "participant", "user:bob")
    assert authz.check("thread:t1", "participant", "user:bob")


def test_deny_by_default_no_tuples(authz):
    assert not authz.check("thread:t1", "read", "user:alice")


def test_permission_names_resolve(authz):
    authz.write_tuple(T("agent:a#maintainer@user:bob"))
    assert authz.check("agent:a", "configure", "user:bob")
    assert not authz.check("agent:a", "delete", "user:bob")


def test_cycle_terminates(authz):
    authz.write_tuple(T("thread:t1#participant@thread:t2#participant"))
    authz.write_tuple(T("thread:t2#participant@thread:t1#participant"))
    assert not authz.check("thread:t1", "participant", "user:alice")
    authz.write_tuple(T("thread:t2#participant@user:alice"))
    assert authz.check("thread:t1", "participant", "user:alice")


def test_depth_limit_is_loud(authz):
    # a 20-hop userset chain exceeds the default limit of 16
    for i in range(20):
        authz.write_tuple(
            T(f"thread:t{i}#participant@thread:t{i + 1}#participant")
        )
    authz.write_tuple(T("thread:t20#participant@user:deep"))
    with pytest.raises(DepthExceeded):
        authz.check("thread:t0", "participant", "user:deep")
    assert authz.check("thread:t0", "participant", "user:deep", depth_limit=64)


def test_grant_defaults_on_thread_create(authz):
    authz.grant_defaults_on_thread_create("t1", "user:alice", "a")
    assert authz.check("thread:t1", "post", "user:alice")
    assert authz.check("thread:t1", "post", "agent:a")
    assert not authz.check("thread:t1", "post", "user:carol")
    assert not authz.check("thread:t1", "post", "agent:b")


# -- randomized oracle equivalence ------------------------------------------


def random_graph(rng: random.Random, max_tuples: int = 100) -> list[RelationTuple]:
    agents = [f"agent:a{i}" for i in range(8)]
    threads = [f"thread:t{i}" for i in range(8)]
    users = [f"user:u{i}" for i in range(6)]
    tuples = set()
    for _ in range(rng.randint(1, max_tuples)):
        if rng.random() < 0.5:
            obj = rng.choice(agents)
            rel = rng.choice(["owner", "maintainer", "participant"])
        else:
            obj = rng.choice(threads)
            rel = "participant"
        roll = rng.random()
        if roll < 0.5:
            subj = rng.choice(users)
        elif roll < 0.7:
            subj = rng.choice(agents)
        elif roll < 0.85:
            subj = f"{rng.choice(agents)}#{rng.choice(['owner', 'maintainer', 'participant'])}"
        else:
            subj = f"{rng.choice(threads)}#participant"
        tuples.add(RelationTuple(obj, rel, subj))
    return list(tuples)


def test_oracle_equivalence_sample():
    rng = random.Random(1234)
    for _ in range(50):
        tuples = random_graph(rng)
        authz = Authz(Store())
        for t in tuples:
            authz.write_tuple(t)
        for _ in range(50):
            if rng.random() < 0.6:
                obj = f"agent:a{rng.randint(0, 7)}"
                name = rng.choice(
                    ["owner", "maintainer", "participant", "configure", "delete", "create_thread"]
                )
            else:
                obj = f"thread:t{rng.randint(0, 7)}"
                name = rng.choice(["participant", "read", "post"])
            subj = f"user:u{rng.randint(0, 5)}"
            assert authz.check(obj, name, subj, depth_limit=64) == oracle_check(
                tuples, obj, name, subj
            ), f"{obj} {name} {subj} over {sorted(t.text() for t in tuples)}"


def test_monotonicity_adding_never_flips_true_to_false():
    rng = random.Random(99)
    tuples = random_graph(rng, max_tuples=30)
    authz = Authz(Store())
    queries = [
        (f"agent:a{i}", rel, f"user:u{j}")
        for i in range(4)
        for j in range(4)
        for rel in ("owner", "maintainer", "participant")
    ]
    before = {}
    added = []
    for t in tuples:
        for q in queries:
            result = authz.check(*q, depth_limit=64)
            if q in before and before[q]:
                assert result, f"adding {added[-1]} flipped {q} to false"
            before[q] = result
        authz.write_tuple(t)
        added.append(t.text())


def test_role_implication_chain():
    rng = random.Random(5)
    for _ in range(20):
        tuples = random_graph(rng, max_tuples=40)
        authz = Authz(Store())
        for t in tuples:
            authz.write_tuple(t)
        for i in range(8):
            for j in range(6):
                obj, subj = f"agent:a{i}", f"user:u{j}"
                if authz.check(obj, "owner", subj, depth_limit=64):
                    assert authz.check(obj, "maintainer", subj, depth_limit=64)
                if authz.check(obj, "maintainer", subj, depth_limit=64):
                    assert authz.check(obj, "participant", subj, depth_limit=64)


# -- dial policies -----------------------------------------------------------


def test_dial_deny_by_default(authz):
    rng = random.Random(3)
    for _ in range(200):
        attrs = {"agent_id": f"a{rng.randint(0, 5)}"}
        assert not authz.dial_allowed(attrs, f"svc{rng.randint(0, 5)}")


def test_dial_policy_exact_grant(authz):
    authz.put_policy("p1", {"agent_id": "a"}, ["svc1"])
    assert authz.dial_allowed({"agent_id": "a"}, "svc1")
    assert not authz.dial_allowed({"agent_id": "a"}, "svc2")
    assert not authz.dial_allowed({"agent_id": "b"}, "svc1")


def test_dial_selector_is_conjunction(authz):
    authz.put_policy("p1", {"agent_id": "a", "thread_id": "t1"}, ["svc"])
    assert authz.dial_allowed({"agent_id": "a", "thread_id": "t1"}, "svc")
    assert not authz.dial_allowed({"agent_id": "a"}, "svc")


def test_dial_policy_delete_revokes(authz):
    authz.put_policy("p1", {"agent_id": "a"}, ["svc1"])
    authz.delete_policy("p1")
    assert not authz.dial_allowed({"agent_id": "a"}, "svc1")
