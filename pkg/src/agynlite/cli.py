"""`agynctl`: admin CLI over the gateway API.

Exit codes: 0 success or empty plan, 1 error, 2 non-empty plan (CI drift
gate).
"""

from __future__ import annotations

import json
import sys

import click

from . import configctl
from .configctl import (
    ApplyHalted,
    ConfigctlError,
    GatewayClient,
    compute_plan,
    parse_paths,
    render_plan,
)


def _client(addr, token) -> GatewayClient:
    if not addr or not token:
        raise click.ClickException("set AGYNLITE_ADDR / AGYNLITE_TOKEN or pass --addr/--token")
    return GatewayClient(addr, token)


@click.group()
@click.option("--addr", envvar="AGYNLITE_ADDR", default=None)
@click.option("--token", envvar="AGYNLITE_TOKEN", default=None)
@click.pass_context
def main(ctx, addr, token):
    ctx.obj = {"addr": addr, "token": token}


def _make_plan(ctx, files, allow_delete):
    desired = parse_paths(list(files))
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    plan = compute_plan(
        desired, client.live_agents(), client.live_secrets(), allow_delete=allow_delete
    )
    return desired, plan, client


@main.command()
@click.option("-f", "--file", "files", multiple=True, required=True)
@click.option("--allow-delete", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def plan(ctx, files, allow_delete, as_json):
    """Show what apply would change."""
    try:
        _, p, client = _make_plan(ctx, files, allow_delete)
        client.close()
    except ConfigctlError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    click.echo(json.dumps(p.to_doc(), indent=2) if as_json else render_plan(p))
    sys.exit(0 if p.empty else 2)


@main.command()
@click.option("-f", "--file", "files", multiple=True, required=True)
@click.option("--allow-delete", is_flag=True)
@click.option("--auto-approve", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
@click.pass_context
def apply(ctx, files, allow_delete, auto_approve, as_json):
    """Apply the computed plan through the gateway."""
    try:
        desired, p, client = _make_plan(ctx, files, allow_delete)
        if p.empty:
            click.echo("No changes.")
            client.close()
            return
        click.echo(render_plan(p))
        if not auto_approve and not click.confirm("Apply these actions?"):
            client.close()
            sys.exit(1)
        report = configctl.apply_plan(p, desired, client)
        client.close()
    except ApplyHalted as e:
        click.echo(json.dumps(e.report, indent=2) if as_json else f"halted: {e}", err=True)
        sys.exit(1)
    except ConfigctlError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    if as_json:
        click.echo(json.dumps(report, indent=2))
    else:
        for entry in report:
            a = entry["action"]
            click.echo(f"{entry['status']}: {a['op']} {a['kind']} {a['target']}")


@main.group()
def agents():
    pass


@agents.command("list")
@click.pass_context
def agents_list(ctx):
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        for agent_id, doc in sorted(client.live_agents().items()):
            click.echo(f"{agent_id}\trev {doc['revision']}\tmodel {doc['model']}")
    finally:
        client.close()


@main.group()
def instances():
    pass


@instances.command("list")
@click.option("--watch", is_flag=True, help="follow instance state events")
@click.pass_context
def instances_list(ctx, watch):
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        for inst in client.list_instances():
            click.echo(
                f"{inst['instance_id']}\t{inst['agent_id']}\t{inst['thread_id']}\t{inst['state']}"
            )
        if watch:
            for topic, payload in client.stream_events():
                if topic == "instance.state":
                    click.echo(
                        f"{payload['instance_id']}\t{payload['agent_id']}"
                        f"\t{payload['thread_id']}\t{payload['state']}"
                    )
    except KeyboardInterrupt:
        pass
    finally:
        client.close()


@main.group("tuple")
def tuple_cmd():
    pass


@tuple_cmd.command("write")
@click.argument("text")
@click.pass_context
def tuple_write(ctx, text):
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        client.write_tuple(text)
        click.echo(f"written: {text}")
    except ConfigctlError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    finally:
        client.close()


@tuple_cmd.command("check")
@click.argument("text")
@click.pass_context
def tuple_check(ctx, text):
    """TEXT is object#relation@subject; relation may be a permission name."""
    obj_rel, _, subject = text.partition("@")
    obj, _, relation = obj_rel.partition("#")
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        allowed = client.check(obj, relation, subject)
        click.echo("allowed" if allowed else "denied")
        sys.exit(0 if allowed else 2)
    except ConfigctlError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)
    finally:
        client.close()


@main.group()
def identity():
    pass


@identity.command("list")
@click.pass_context
def identity_list(ctx):
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        for ident in client.list_identities():
            click.echo(
                f"{ident['identity_id']}\t{ident['identity_class']}\t{ident['subject']}"
            )
    finally:
        client.close()


@main.group()
def events():
    pass


@events.command("tail")
@click.argument("topic")
@click.pass_context
def events_tail(ctx, topic):
    client = _client(ctx.obj["addr"], ctx.obj["token"])
    try:
        for ev_topic, payload in client.stream_events():
            if ev_topic == topic:
                click.echo(json.dumps(payload))
    except KeyboardInterrupt:
        pass
    finally:
        client.close()


if __name__ == "__main__":
    main()
