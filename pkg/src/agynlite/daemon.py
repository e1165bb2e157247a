"""`agynd`: run the control plane as a single process."""

from __future__ import annotations

import json
import signal
import threading

import click

from .platform import Platform, PlatformConfig


@click.command()
@click.option("--data-dir", default="./agynlite-data", show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8420, show_default=True)
@click.option("--users", "users_path", default=None, help="users.json (token -> principal)")
@click.option("--console", "console_dir", default=None, help="directory of built console assets")
@click.option("--master-key", envvar="AGYNLITE_MASTER_KEY", default=None)
def main(data_dir, host, port, users_path, console_dir, master_key):
    users = {}
    if users_path:
        with open(users_path) as f:
            users = json.load(f)
    platform = Platform(
        PlatformConfig(
            data_dir=data_dir,
            users=users,
            master_key_hex=master_key,
            host=host,
            port=port,
            console_dir=console_dir,
        )
    )
    platform.start()
    click.echo(f"agynd listening on {platform.base_url}")
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    stop.wait()
    platform.stop()


if __name__ == "__main__":
    main()
