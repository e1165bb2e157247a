"""Workload runner: one main container plus sidecars, isolated in-process.

A workload is a set of simulated containers, each running its behavior on
its own thread with a private env map, a private scratch directory, and an
inbox. Containers of one workload may exchange messages over loopback;
anything across workloads is refused (CrossWorkload) — that refusal is the
isolation guarantee. Persistent volumes are plain directories that outlive
workloads and attach to at most one workload at a time.

The identity token rides in the workload's network-proxy scope: behaviors
reach the platform through a proxy object that attaches it, and it never
appears in any container's env map.

This module is the seam where a real container backend would plug in: the
orchestrator only consumes create_workload / stop_workload / list_workloads /
deliver_thread_message / loopback_send / inspect_env.
"""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from .clock import Clock, SystemClock


class RunnerError(Exception):
    pass


class VolumeBusy(RunnerError):
    pass


class UnknownBehavior(RunnerError):
    pass


class UnknownWorkload(RunnerError):
    pass


class UnknownContainer(RunnerError):
    pass


class CrossWorkload(RunnerError):
    """Loopback attempted between containers of different workloads."""


@dataclass
class WorkloadSpec:
    workload_id: str
    containers: list[tuple[str, str, dict]]  # (name, behavior id, env); first is main
    volume_mounts: list[tuple[str, str]] = field(default_factory=list)  # (volume, mount path)
    identity_token: Optional[str] = None
    thread_context: dict = field(default_factory=dict)


class BehaviorContext:
    """Everything a simulated container behavior can see."""

    def __init__(
        self,
        name: str,
        env: dict,
        scratch_dir: str,
        volume_paths: dict,
        thread_context: dict,
        proxy,
        clock: Clock,
        stop: threading.Event,
        loopback_reply: Callable[[str, bytes], None],
    ):
        self.name = name
        self.env = env
        self.scratch_dir = scratch_dir
        self.volume_paths = volume_paths  # mount path -> backing dir
        self.thread_context = thread_context
        self.proxy = proxy  # None when the workload has no platform access
        self.clock = clock
        self.stop = stop
        self.inbox: "queue.Queue[dict]" = queue.Queue()
        self.loopback_reply = loopback_reply

    def workspace(self) -> Optional[str]:
        """Backing dir of the first mounted volume, if any."""
        if not self.volume_paths:
            return None
        return self.volume_paths[sorted(self.volume_paths)[0]]


class _Container:
    def __init__(self, ctx: BehaviorContext, behavior: Callable[[BehaviorContext], None]):
        self.ctx = ctx
        self.thread = threading.Thread(
            target=behavior, args=(ctx,), daemon=True, name=f"container-{ctx.name}"
        )


class _Workload:
    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.containers: dict[str, _Container] = {}
        self.stop_event = threading.Event()


class VolumeManager:
    """Directory-backed persistent volumes; attach is a path grant."""

    def __init__(self, root: str):
        self._root = root
        self._attached: dict[str, str] = {}  # volume -> workload_id
        self._lock = threading.Lock()
        os.makedirs(root, exist_ok=True)

    def path(self, name: str) -> str:
        p = os.path.join(self._root, name)
        os.makedirs(p, exist_ok=True)
        return p

    def attach(self, name: str, workload_id: str) -> str:
        with self._lock:
            holder = self._attached.get(name)
            if holder is not None and holder != workload_id:
                raise VolumeBusy(f"volume {name} attached to {holder}")
            self._attached[name] = workload_id
            return self.path(name)

    def detach_all(self, workload_id: str) -> None:
        with self._lock:
            for name, holder in list(self._attached.items()):
                if holder == workload_id:
                    del self._attached[name]

    def attached_to(self, name: str) -> Optional[str]:
        with self._lock:
            return self._attached.get(name)


class SimulatedRunner:
    """In-process runner honoring the container-isolation contract."""

    def __init__(
        self,
        data_root: str,
        clock: Optional[Clock] = None,
        proxy_factory: Optional[Callable[[str], object]] = None,
        extra_behaviors: Optional[dict] = None,
    ):
        self._clock = clock or SystemClock()
        self._proxy_factory = proxy_factory
        self.volumes = VolumeManager(os.path.join(data_root, "volumes"))
        self._scratch_root = os.path.join(data_root, "scratch")
        os.makedirs(self._scratch_root, exist_ok=True)
        self._workloads: dict[str, _Workload] = {}
        self._lock = threading.Lock()
        self._behaviors = dict(BUILTIN_BEHAVIORS)
        if extra_behaviors:
            self._behaviors.update(extra_behaviors)

    # -- runner interface -------------------------------------------------

    def create_workload(self, spec: WorkloadSpec) -> str:
        with self._lock:
            if spec.workload_id in self._workloads:
                raise RunnerError(f"workload id reused: {spec.workload_id}")
            for _, behavior, _ in spec.containers:
                if behavior not in self._behaviors:
                    raise UnknownBehavior(behavior)
            mounts: dict[str, str] = {}
            attached: list[str] = []
            try:
                for vol, mount in spec.volume_mounts:
                    mounts[mount] = self.volumes.attach(vol, spec.workload_id)
                    attached.append(vol)
            except VolumeBusy:
                self.volumes.detach_all(spec.workload_id)
                raise
            w = _Workload(spec)
            proxy = (
                self._proxy_factory(spec.identity_token)
                if self._proxy_factory and spec.identity_token
                else None
            )
            for name, behavior, env in spec.containers:
                scratch = os.path.join(self._scratch_root, spec.workload_id, name)
                os.makedirs(scratch, exist_ok=True)
                ctx = BehaviorContext(
                    name=name,
                    env=dict(env),
                    scratch_dir=scratch,
                    volume_paths=dict(mounts),
                    thread_context=dict(spec.thread_context),
                    proxy=proxy,
                    clock=self._clock,
                    stop=w.stop_event,
                    loopback_reply=self._make_loopback(spec.workload_id, name),
                )
                w.containers[name] = _Container(ctx, self._behaviors[behavior])
            self._workloads[spec.workload_id] = w
        for c in w.containers.values():
            c.thread.start()
        return spec.workload_id

    def stop_workload(self, workload_id: str) -> None:
        with self._lock:
            w = self._workloads.pop(workload_id, None)
        if w is None:
            raise UnknownWorkload(workload_id)
        w.stop_event.set()
        for c in w.containers.values():
            c.ctx.inbox.put({"kind": "stop"})
        for c in w.containers.values():
            c.thread.join(timeout=5)
        self.volumes.detach_all(workload_id)

    def list_workloads(self) -> list[str]:
        with self._lock:
            return sorted(self._workloads)

    def loopback_send(
        self, workload_id: str, from_container: str, to_container: str, message: bytes
    ) -> None:
        with self._lock:
            w = self._workloads.get(workload_id)
            if w is None:
                raise UnknownWorkload(workload_id)
            if from_container not in w.containers:
                raise UnknownContainer(from_container)
            target = w.containers.get(to_container)
            if target is None:
                # the sender's workload does not contain the target: if it
                # exists anywhere else this is a cross-workload attempt
                for other_id, other in self._workloads.items():
                    if other_id != workload_id and to_container in other.containers:
                        raise CrossWorkload(
                            f"{workload_id}/{from_container} -> {other_id}/{to_container}"
                        )
                raise UnknownContainer(to_container)
        target.ctx.inbox.put(
            {"kind": "loopback", "from": from_container, "data": message}
        )

    def inspect_env(self, workload_id: str, container: str) -> dict:
        with self._lock:
            w = self._workloads.get(workload_id)
            if w is None:
                raise UnknownWorkload(workload_id)
            c = w.containers.get(container)
            if c is None:
                raise UnknownContainer(container)
            return dict(c.ctx.env)

    def deliver_thread_message(self, workload_id: str, message: dict) -> None:
        """Forward a thread message to the workload's main container."""
        with self._lock:
            w = self._workloads.get(workload_id)
            if w is None:
                raise UnknownWorkload(workload_id)
            main = w.spec.containers[0][0]
            c = w.containers[main]
        c.ctx.inbox.put({"kind": "thread.message", "message": message})

    # -- internals --------------------------------------------------------

    def _make_loopback(self, workload_id: str, from_container: str):
        def reply(to_container: str, data: bytes) -> None:
            self.loopback_send(workload_id, from_container, to_container, data)

        return reply


# ---------------------------------------------------------------------------
# built-in behaviors
# ---------------------------------------------------------------------------


def _keepalive_loop(ctx: BehaviorContext, activity: Optional[dict] = None) -> None:
    """Emit keep-alives while the container has recent work.

    `activity["last_work"]` (ms) is bumped by the behavior on each unit of
    work; once it is more than `active_window_s` in the past the loop goes
    quiet so the platform can observe the instance as idle. It resumes if
    work arrives again. Without an activity record the loop beats forever.
    """
    instance_id = ctx.thread_context.get("instance_id")
    interval = ctx.thread_context.get("keepalive_interval_s", 10)
    window_s = ctx.thread_context.get("active_window_s", 3 * interval)
    if ctx.proxy is None or not instance_id:
        return
    while not ctx.stop.is_set():
        quiet = (
            activity is not None
            and ctx.clock.now_ms() - activity["last_work"] > window_s * 1000
        )
        if not quiet:
            try:
                ctx.proxy.post(f"/instances/{instance_id}/keepalive", {})
            except Exception:
                pass  # gateway may be mid-shutdown; the next beat retries
        ctx.stop.wait(interval)


def echo_agent(ctx: BehaviorContext) -> None:
    """Replies to every thread message; counts messages in its workspace.

    The per-thread counter lives on the mounted volume, so it survives
    reclamation and proves state reattachment across spawns.
    """
    activity = {"last_work": ctx.clock.now_ms()}
    ka = threading.Thread(target=_keepalive_loop, args=(ctx, activity), daemon=True)
    ka.start()
    thread_id = ctx.thread_context.get("thread_id")
    ws = ctx.workspace()
    counter_path = os.path.join(ws, "seen.txt") if ws else None
    while not ctx.stop.is_set():
        try:
            item = ctx.inbox.get(timeout=0.2)
        except queue.Empty:
            continue
        if item["kind"] != "thread.message":
            continue
        activity["last_work"] = ctx.clock.now_ms()
        count = 0
        if counter_path:
            if os.path.exists(counter_path):
                count = int(open(counter_path).read() or 0)
            count += 1
            with open(counter_path, "w") as f:
                f.write(str(count))
        text = item["message"].get("text", "")
        if ctx.proxy is not None and thread_id:
            try:
                ctx.proxy.post(
                    f"/threads/{thread_id}/messages",
                    {"text": f"echo[{count}]: {text}"},
                )
            except Exception:
                pass


def dialer_agent(ctx: BehaviorContext) -> None:
    """Treats each inbound message as a service name and tries to dial it."""
    activity = {"last_work": ctx.clock.now_ms()}
    ka = threading.Thread(target=_keepalive_loop, args=(ctx, activity), daemon=True)
    ka.start()
    thread_id = ctx.thread_context.get("thread_id")
    while not ctx.stop.is_set():
        try:
            item = ctx.inbox.get(timeout=0.2)
        except queue.Empty:
            continue
        if item["kind"] != "thread.message" or ctx.proxy is None:
            continue
        activity["last_work"] = ctx.clock.now_ms()
        service = item["message"].get("text", "").strip()
        try:
            resp = ctx.proxy.post(f"/dial/{service}", {})
            verdict = "allowed" if resp.get("allowed") else "denied"
        except Exception:
            verdict = "denied"
        if thread_id:
            try:
                ctx.proxy.post(
                    f"/threads/{thread_id}/messages",
                    {"text": f"dial {service}: {verdict}"},
                )
            except Exception:
                pass


def mock_mcp(ctx: BehaviorContext) -> None:
    """Sidecar that answers loopback requests with the env vars it can see."""
    while not ctx.stop.is_set():
        try:
            item = ctx.inbox.get(timeout=0.2)
        except queue.Empty:
            continue
        if item["kind"] != "loopback":
            continue
        visible = ",".join(sorted(ctx.env))
        try:
            ctx.loopback_reply(item["from"], visible.encode())
        except RunnerError:
            pass


BUILTIN_BEHAVIORS: dict[str, Callable[[BehaviorContext], None]] = {
    "echo-agent": echo_agent,
    "dialer-agent": dialer_agent,
    "mock-mcp": mock_mcp,
}
