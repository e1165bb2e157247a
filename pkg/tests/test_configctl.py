import json
import random

import pytest

from agynlite.configctl import (
    ApplyHalted,
    GatewayClient,
    ParseError,
    Plan,
    SchemaError,
    StalePlan,
    UnknownModule,
    apply_plan,
    compute_plan,
    parse,
    parse_paths,
    render_plan,
)

from conftest import ECHO_AGENT_DOC


def agent_doc(prompt="p", **over):
    doc = json.loads(json.dumps(ECHO_AGENT_DOC))
    doc["system_prompt"] = prompt
    doc.update(over)
    return doc


# -- parse -------------------------------------------------------------------


def test_parse_module_expansion():
    docs = [
        {
            "modules": {
                "mcp-db": {
                    "sidecars": [{"name": "mcp-db", "image_or_behavior": "mock-mcp"}],
                    "secret_bindings": [
                        {"secret_name": "db-pass", "target_container": "mcp-db", "env_var": "TOKEN"}
                    ],
                }
            },
            "agents": {"a": dict(agent_doc(), use_modules=["mcp-db"])},
        }
    ]
    state = parse(docs)
    expanded = state.agents["a"]
    assert [c["name"] for c in expanded["sidecars"]] == ["mcp-db"]
    assert expanded["secret_bindings"][0]["secret_name"] == "db-pass"
    assert "use_modules" not in expanded


def test_parse_unknown_module():
    with pytest.raises(UnknownModule):
        parse([{"agents": {"a": dict(agent_doc(), use_modules=["ghost"])}}])


def test_parse_duplicate_agent():
    with pytest.raises(SchemaError):
        parse([{"agents": {"a": agent_doc()}}, {"agents": {"a": agent_doc()}}])


def test_parse_schema_error():
    with pytest.raises(SchemaError):
        parse([{"agents": {"a": {"system_prompt": "p"}}}])  # missing required fields


def test_parse_error_has_position(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  broken\n}")
    with pytest.raises(ParseError) as e:
        parse_paths([str(bad)])
    assert ":2:" in str(e.value)


def test_parse_secret_forms(monkeypatch):
    monkeypatch.setenv("TEST_SECRET_VAR", "from-env")
    state = parse(
        [{"secrets": {"a": "literal-direct", "b": {"literal": "lit"}, "c": {"env": "TEST_SECRET_VAR"}}}]
    )
    assert state.secrets == {"a": "literal-direct", "b": "lit", "c": "from-env"}


# -- plan --------------------------------------------------------------------


def test_plan_fixed_point():
    desired = parse([{"agents": {"a": agent_doc()}}])
    live = {"a": dict(agent_doc(), agent_id="a", revision=3)}
    plan = compute_plan(desired, live, {})
    assert plan.empty and plan.actions == []


def test_plan_prompt_change_diffs_exactly_prompt():
    desired = parse([{"agents": {"a": agent_doc(prompt="new")}}])
    live = {"a": dict(agent_doc(prompt="old"), agent_id="a", revision=1)}
    plan = compute_plan(desired, live, {})
    assert len(plan.actions) == 1
    action = plan.actions[0]
    assert action.op == "update" and action.stamp == 1
    assert list(action.diff) == ["system_prompt"]
    assert action.diff["system_prompt"] == {"before": "old", "after": "new"}


def test_plan_delete_guarded():
    desired = parse([{}])
    live = {"a": dict(agent_doc(), agent_id="a", revision=1)}
    blocked = compute_plan(desired, live, {})
    assert blocked.actions[0].blocked and blocked.empty
    allowed = compute_plan(desired, live, {}, allow_delete=True)
    assert not allowed.empty and allowed.actions[0].op == "delete"


def test_plan_secret_drift_by_digest():
    from agynlite.configctl import secret_digest

    desired = parse([{"secrets": {"s": "new-value"}}])
    plan = compute_plan(desired, {}, {"s": secret_digest("old-value")})
    assert [a.op for a in plan.actions] == ["update"]
    plan2 = compute_plan(desired, {}, {"s": secret_digest("new-value")})
    assert plan2.empty


def test_rendered_plan_never_contains_secret_literal():
    desired = parse([{"secrets": {"s": "super-secret-literal"}, "agents": {"a": agent_doc()}}])
    plan = compute_plan(desired, {}, {})
    rendered = render_plan(plan) + json.dumps(plan.to_doc())
    assert "super-secret-literal" not in rendered


# -- apply against a live platform ------------------------------------------


@pytest.fixture
def admin_client(platform):
    c = GatewayClient(platform.base_url, "admin-token")
    yield c
    c.close()


def test_apply_then_replan_empty(platform, admin_client):
    desired = parse([{"agents": {"bot": agent_doc()}, "secrets": {"s1": "v1"}}])
    plan = compute_plan(desired, admin_client.live_agents(), admin_client.live_secrets())
    report = apply_plan(plan, desired, admin_client)
    assert all(r["status"] == "applied" for r in report)
    plan2 = compute_plan(desired, admin_client.live_agents(), admin_client.live_secrets())
    assert plan2.empty


def test_apply_same_plan_twice_is_stale(platform, admin_client):
    desired = parse([{"agents": {"bot": agent_doc()}}])
    plan = compute_plan(desired, admin_client.live_agents(), admin_client.live_secrets())
    apply_plan(plan, desired, admin_client)
    with pytest.raises(StalePlan):
        apply_plan(plan, desired, admin_client)


def test_apply_halts_on_gateway_error(platform, admin_client):
    alice = GatewayClient(platform.base_url, "alice-token")
    other = GatewayClient(platform.base_url, "bob-token")
    try:
        alice.put_agent("bot", agent_doc())
        desired = parse([{"agents": {"bot": agent_doc(prompt="changed")}}])
        plan = compute_plan(desired, other.live_agents(), other.live_secrets())
        with pytest.raises(ApplyHalted):
            apply_plan(plan, desired, other)  # bob lacks configure -> 403
        assert other.live_agents()["bot"]["system_prompt"] == "p"
    finally:
        alice.close()
        other.close()


def test_apply_convergence_randomized(platform, admin_client):
    rng = random.Random(31)
    for round_no in range(10):
        agents = {}
        for i in range(rng.randint(0, 4)):
            agents[f"agent-{i}"] = agent_doc(
                prompt=f"round {round_no} prompt {rng.randint(0, 5)}",
                idle_timeout_s=rng.randint(5, 500),
            )
        secrets = {f"s{i}": f"value-{rng.randint(0, 3)}" for i in range(rng.randint(0, 3))}
        desired = parse([{"agents": agents, "secrets": secrets}])
        plan = compute_plan(
            desired, admin_client.live_agents(), admin_client.live_secrets(),
            allow_delete=True,
        )
        apply_plan(plan, desired, admin_client)
        replan = compute_plan(
            desired, admin_client.live_agents(), admin_client.live_secrets(),
            allow_delete=True,
        )
        assert replan.empty, f"round {round_no}: {render_plan(replan)}"


# -- CLI ---------------------------------------------------------------------


def write_state(tmp_path, prompt="p"):
    d = tmp_path / "state"
    d.mkdir(exist_ok=True)
    (d / "main.json").write_text(json.dumps({"agents": {"bot": agent_doc(prompt=prompt)}}))
    return str(d)


def run_cli(platform, args):
    from click.testing import CliRunner

    from agynlite.cli import main

    return CliRunner().invoke(
        main,
        ["--addr", platform.base_url, "--token", "admin-token"] + args,
        catch_exceptions=False,
    )


def test_cli_plan_exit_2_on_drift(platform, tmp_path):
    state = write_state(tmp_path)
    result = run_cli(platform, ["plan", "-f", state])
    assert result.exit_code == 2
    assert "+ agent bot" in result.output


def test_cli_apply_then_plan_exit_0(platform, tmp_path):
    state = write_state(tmp_path)
    assert run_cli(platform, ["apply", "-f", state, "--auto-approve"]).exit_code == 0
    assert run_cli(platform, ["plan", "-f", state]).exit_code == 0


def test_cli_agents_and_tuple_verbs(platform, tmp_path):
    state = write_state(tmp_path)
    run_cli(platform, ["apply", "-f", state, "--auto-approve"])
    listing = run_cli(platform, ["agents", "list"])
    assert "bot" in listing.output
    assert run_cli(platform, ["tuple", "write", "agent:bot#owner@user:zoe"]).exit_code == 0
    assert run_cli(platform, ["tuple", "check", "agent:bot#configure@user:zoe"]).exit_code == 0
    assert run_cli(platform, ["tuple", "check", "agent:bot#configure@user:carol"]).exit_code == 2
