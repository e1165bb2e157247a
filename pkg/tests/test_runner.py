import os
import queue
import random

import pytest

from agynlite.runner import (
    BehaviorContext,
    CrossWorkload,
    SimulatedRunner,
    UnknownBehavior,
    UnknownContainer,
    UnknownWorkload,
    VolumeBusy,
    WorkloadSpec,
)


def inert(ctx: BehaviorContext):
    """Test behavior: writes a marker to the workspace, then idles."""
    ws = ctx.workspace()
    if ws is not None and "write" in ctx.env:
        with open(os.path.join(ws, "marker.txt"), "w") as f:
            f.write(ctx.env["write"])
    ctx.stop.wait()


def collector(ctx: BehaviorContext):
    """Test behavior: copies loopback payloads into a scratch file in order."""
    path = os.path.join(ctx.scratch_dir, "received.log")
    while not ctx.stop.is_set():
        try:
            item = ctx.inbox.get(timeout=0.1)
        except queue.Empty:
            continue
        if item["kind"] == "loopback":
            with open(path, "ab") as f:
                f.write(item["data"] + b"\n")


@pytest.fixture
def runner(tmp_path):
    return SimulatedRunner(
        str(tmp_path), extra_behaviors={"inert": inert, "collector": collector}
    )


def spec(wid, containers=None, volumes=None, token=None):
    return WorkloadSpec(
        workload_id=wid,
        containers=containers or [("main", "inert", {})],
        volume_mounts=volumes or [],
        identity_token=token,
    )


def test_create_and_list(runner):
    runner.create_workload(spec("w1"))
    assert runner.list_workloads() == ["w1"]


def test_unknown_behavior(runner):
    with pytest.raises(UnknownBehavior):
        runner.create_workload(spec("w1", containers=[("main", "nope", {})]))


def test_volume_persists_after_stop(runner):
    runner.create_workload(
        spec("w1", containers=[("main", "inert", {"write": "hello"})], volumes=[("ws", "/ws")])
    )
    runner.stop_workload("w1")
    vol_dir = runner.volumes.path("ws")
    assert open(os.path.join(vol_dir, "marker.txt")).read() == "hello"


def test_volume_readable_after_reattach(runner):
    runner.create_workload(
        spec("w1", containers=[("main", "inert", {"write": "from-w1"})], volumes=[("ws", "/ws")])
    )
    runner.stop_workload("w1")
    runner.create_workload(spec("w2", volumes=[("ws", "/ws")]))
    vol_dir = runner.volumes.path("ws")
    assert open(os.path.join(vol_dir, "marker.txt")).read() == "from-w1"


def test_volume_busy(runner):
    runner.create_workload(spec("w1", volumes=[("ws", "/ws")]))
    with pytest.raises(VolumeBusy):
        runner.create_workload(spec("w2", volumes=[("ws", "/ws")]))


def test_stop_removes_from_listing(runner):
    runner.create_workload(spec("w1"))
    runner.stop_workload("w1")
    assert runner.list_workloads() == []


def test_stop_twice_unknown(runner):
    runner.create_workload(spec("w1"))
    runner.stop_workload("w1")
    with pytest.raises(UnknownWorkload):
        runner.stop_workload("w1")


# -- loopback ----------------------------------------------------------------


def wait_for_file(path, timeout=2.0):
    import time

    end = time.monotonic() + timeout
    while time.monotonic() < end:
        if os.path.exists(path):
            return open(path, "rb").read()
        time.sleep(0.02)
    return b""


def test_loopback_within_workload(runner, tmp_path):
    runner.create_workload(
        spec("w1", containers=[("main", "inert", {}), ("side", "collector", {})])
    )
    runner.loopback_send("w1", "main", "side", b"ping")
    log = os.path.join(str(tmp_path), "scratch", "w1", "side", "received.log")
    assert wait_for_file(log) == b"ping\n"


def test_loopback_ordered_per_sender(runner, tmp_path):
    runner.create_workload(
        spec("w1", containers=[("main", "inert", {}), ("side", "collector", {})])
    )
    for i in range(5):
        runner.loopback_send("w1", "main", "side", f"m{i}".encode())
    log = os.path.join(str(tmp_path), "scratch", "w1", "side", "received.log")
    import time

    time.sleep(0.3)
    assert wait_for_file(log) == b"m0\nm1\nm2\nm3\nm4\n"


def test_loopback_cross_workload_refused(runner):
    runner.create_workload(spec("w1", containers=[("main1", "inert", {})]))
    runner.create_workload(spec("w2", containers=[("side2", "collector", {})]))
    with pytest.raises(CrossWorkload):
        runner.loopback_send("w1", "main1", "side2", b"leak")


def test_loopback_unknown_container(runner):
    runner.create_workload(spec("w1"))
    with pytest.raises(UnknownContainer):
        runner.loopback_send("w1", "main", "ghost", b"x")


# -- env inspection ----------------------------------------------------------


def test_inspect_env_exact(runner):
    runner.create_workload(
        spec("w1", containers=[("main", "inert", {"A": "1"}), ("side", "inert", {"B": "2"})])
    )
    assert runner.inspect_env("w1", "main") == {"A": "1"}
    assert runner.inspect_env("w1", "side") == {"B": "2"}


def test_env_maps_disjoint_across_workloads(runner):
    runner.create_workload(spec("w1", containers=[("main", "inert", {"SECRET": "s1-value"})]))
    runner.create_workload(spec("w2", containers=[("main", "inert", {"OTHER": "x"})]))
    assert "s1-value" not in runner.inspect_env("w2", "main").values()


def test_identity_token_in_no_container_env(runner):
    runner.create_workload(
        spec(
            "w1",
            containers=[("main", "inert", {"A": "1"}), ("side", "inert", {})],
            token="tok-abc123",
        )
    )
    for c in ("main", "side"):
        assert "tok-abc123" not in runner.inspect_env("w1", c).values()


def test_inspect_unknown(runner):
    with pytest.raises(UnknownWorkload):
        runner.inspect_env("nope", "main")
    runner.create_workload(spec("w1"))
    with pytest.raises(UnknownContainer):
        runner.inspect_env("w1", "ghost")


# -- volume durability under churn -------------------------------------------


def test_volume_durability_random_churn(runner):
    rng = random.Random(11)
    expected = {}
    counter = 0
    for i in range(200):
        vol = f"v{rng.randint(0, 4)}"
        value = f"gen-{counter}"
        counter += 1
        wid = f"churn-{i}"
        runner.create_workload(
            spec(wid, containers=[("main", "inert", {"write": value})], volumes=[(vol, "/ws")])
        )
        runner.stop_workload(wid)
        expected[vol] = value
    for vol, value in expected.items():
        marker = os.path.join(runner.volumes.path(vol), "marker.txt")
        assert open(marker).read() == value
