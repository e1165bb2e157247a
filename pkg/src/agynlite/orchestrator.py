"""Reconciliation core: message-driven spawn, keep-alives, idle sweep, recovery.

Consumes `thread.message` events and drives the per-(agent, thread)
instance state machine:

    Provisioning -> Running -> Stopping -> Stopped
    Provisioning -> Failed
    Running      -> Failed

At most one instance per (agent, thread) is ever in a live state
(Provisioning/Running/Stopping); the live-index key in the store is
CAS-reserved so concurrent spawns cannot race past each other.

Spawn order is fixed: resolve secrets, mint identity, create workload;
a failure rolls back in reverse. Reclamation stops the workload first and
deletes the identity only after the runner confirms the stop, so no live
workload ever holds a revoked identity's slot.

Event handling is idempotent: processed event ids are persisted (retained
up to 10,000) because the bus is at-least-once.
"""

from __future__ import annotations

import json
import secrets as _secrets
import threading
from dataclasses import dataclass, field
from typing import Optional

from .clock import Clock, SystemClock
from .events import Event, EventBus
from .identity import IdentityNotFound, IdentityProvider
from .registry import Registry, RegistryError
from .runner import RunnerError, WorkloadSpec
from .store import Store, VersionConflict
from .threads import ThreadService

LIVE_STATES = ("Provisioning", "Running", "Stopping")

_TRANSITIONS = {
    "Provisioning": {"Running", "Failed"},
    "Running": {"Stopping", "Failed"},
    "Stopping": {"Stopped"},
    "Stopped": set(),
    "Failed": set(),
}

PROCESSED_RETENTION = 10_000


class OrchestratorError(Exception):
    pass


class SpawnFailed(OrchestratorError):
    pass


class UnknownInstance(OrchestratorError):
    pass


class WrongState(OrchestratorError):
    pass


class RunnerUnavailable(OrchestratorError):
    pass


@dataclass
class Instance:
    instance_id: str
    agent_id: str
    thread_id: str
    definition_revision: int
    state: str
    identity_id: Optional[str] = None
    workload_id: Optional[str] = None
    last_active_ts: int = 0
    created_ts: int = 0
    idle_timeout_s: int = 300

    def to_doc(self) -> dict:
        return self.__dict__.copy()

    @staticmethod
    def from_doc(doc: dict) -> "Instance":
        return Instance(**doc)


@dataclass
class ReconcileOutcome:
    spawned: bool = False
    forwarded: bool = False
    noop: bool = False
    instance_id: Optional[str] = None


class Orchestrator:
    def __init__(
        self,
        store: Store,
        bus: EventBus,
        registry: Registry,
        identity: IdentityProvider,
        runner,
        threads: ThreadService,
        clock: Optional[Clock] = None,
        sweep_period_s: Optional[float] = None,
    ):
        self._store = store
        self._bus = bus
        self._registry = registry
        self._identity = identity
        self._runner = runner
        self._threads = threads
        self._clock = clock or SystemClock()
        self.sweep_period_s = sweep_period_s or max(1.0, 300 / 10)
        self._thread_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._pending: dict[str, list[dict]] = {}  # instance_id -> queued messages
        self._processed: set[str] = {
            k.rsplit("/", 1)[1] for k, _, _ in store.scan("orch/processed/")
        }
        self._stop = threading.Event()
        self._workers: list[threading.Thread] = []

    # -- event handling ---------------------------------------------------

    def handle_message_event(self, event: Event, now: Optional[int] = None) -> ReconcileOutcome:
        now = self._clock.now_ms() if now is None else now
        if event.id in self._processed:
            return ReconcileOutcome(noop=True)
        payload = event.payload
        thread_id = payload["thread"]
        meta = self._threads.get_thread(thread_id)
        agent_id = meta["agent_id"]
        with self._thread_lock(thread_id):
            if event.id in self._processed:
                return ReconcileOutcome(noop=True)
            try:
                outcome = self._reconcile(agent_id, thread_id, payload, now)
            finally:
                self._mark_processed(event.id)
            return outcome

    def _reconcile(self, agent_id: str, thread_id: str, payload: dict, now: int) -> ReconcileOutcome:
        sender = payload.get("sender", "")
        inst = self._live_instance(agent_id, thread_id)
        if sender == f"agent:{agent_id}":
            # the serving agent's own reply: activity, never a spawn signal
            if inst is not None and inst.state == "Running":
                inst.last_active_ts = max(inst.last_active_ts, now)
                self._save(inst)
            return ReconcileOutcome(noop=True, instance_id=inst.instance_id if inst else None)
        if inst is not None:
            message = {"text": payload.get("text", ""), "msg": payload.get("msg"), "sender": sender}
            if inst.state == "Provisioning":
                self._pending.setdefault(inst.instance_id, []).append(message)
            elif inst.state == "Running":
                self._runner.deliver_thread_message(inst.workload_id, message)
            inst.last_active_ts = max(inst.last_active_ts, now)
            self._save(inst)
            return ReconcileOutcome(forwarded=True, instance_id=inst.instance_id)
        return self._spawn(agent_id, thread_id, payload, now)

    def _spawn(self, agent_id: str, thread_id: str, payload: dict, now: int) -> ReconcileOutcome:
        instance_id = f"inst-{_secrets.token_hex(6)}"
        inst = Instance(
            instance_id=instance_id,
            agent_id=agent_id,
            thread_id=thread_id,
            definition_revision=0,
            state="Provisioning",
            last_active_ts=now,
            created_ts=now,
        )
        try:
            self._store.put(self._live_key(agent_id, thread_id), instance_id.encode(), 0)
        except VersionConflict:
            # lost the race to another spawner; forward to the winner
            other = self._live_instance(agent_id, thread_id)
            if other is not None and other.state == "Running":
                self._runner.deliver_thread_message(
                    other.workload_id, {"text": payload.get("text", ""), "sender": payload.get("sender")}
                )
                return ReconcileOutcome(forwarded=True, instance_id=other.instance_id)
            return ReconcileOutcome(noop=True)
        self._save(inst)
        self._emit_state(inst)
        identity = None
        workload_id = None
        try:
            harness = self._registry.resolve_harness(agent_id)
            inst.definition_revision = harness.revision
            inst.idle_timeout_s = harness.idle_timeout_s
            identity = self._identity.mint_workload_identity(instance_id, agent_id, thread_id)
            inst.identity_id = identity.identity_id
            self._save(inst)
            workload_id = f"w-{instance_id}"
            spec = WorkloadSpec(
                workload_id=workload_id,
                containers=[(c.name, c.image_or_behavior, c.env) for c in harness.containers],
                volume_mounts=[
                    (f"{agent_id}--{thread_id}--{v.name}", v.mount_path)
                    for v in harness.volumes
                ],
                identity_token=identity.credential,
                thread_context={
                    "thread_id": thread_id,
                    "instance_id": instance_id,
                    "agent_id": agent_id,
                    "system_prompt": harness.system_prompt,
                    "model": harness.model,
                    "keepalive_interval_s": harness.keepalive_interval_s,
                    "recent_messages": self._threads.recent_messages(thread_id),
                },
            )
            self._runner.create_workload(spec)
            inst.workload_id = workload_id
            self._transition(inst, "Running")
        except (RegistryError, RunnerError, IdentityNotFound, Exception) as e:
            # roll back in reverse creation order
            if workload_id is not None:
                try:
                    self._runner.stop_workload(workload_id)
                except RunnerError:
                    pass
            if identity is not None:
                try:
                    self._identity.delete_identity(identity.identity_id)
                except IdentityNotFound:
                    pass
            inst.identity_id = None
            inst.workload_id = None
            self._transition(inst, "Failed")
            self._release_live(inst)
            raise SpawnFailed(f"{agent_id}/{thread_id}: {e}") from e
        # deliver the triggering message plus anything queued mid-provisioning
        queued = self._pending.pop(instance_id, [])
        for m in queued:
            self._runner.deliver_thread_message(workload_id, m)
        self._runner.deliver_thread_message(
            workload_id,
            {"text": payload.get("text", ""), "msg": payload.get("msg"), "sender": payload.get("sender")},
        )
        return ReconcileOutcome(spawned=True, instance_id=instance_id)

    # -- keep-alive / sweep ----------------------------------------------

    def record_keepalive(self, instance_id: str, now: Optional[int] = None) -> None:
        now = self._clock.now_ms() if now is None else now
        inst = self.get_instance(instance_id)
        if inst.state != "Running":
            raise WrongState(f"{instance_id} is {inst.state}")
        inst.last_active_ts = max(inst.last_active_ts, now)
        self._save(inst)

    def sweep_idle(self, now: Optional[int] = None) -> list[str]:
        now = self._clock.now_ms() if now is None else now
        reclaimed = []
        for inst in self.list_instances():
            if inst.state != "Running":
                continue
            if now - inst.last_active_ts <= inst.idle_timeout_s * 1000:
                continue
            with self._thread_lock(inst.thread_id):
                inst = self.get_instance(inst.instance_id)
                if inst.state != "Running" or now - inst.last_active_ts <= inst.idle_timeout_s * 1000:
                    continue
                try:
                    self._reclaim(inst)
                    reclaimed.append(inst.instance_id)
                except (RunnerError, IdentityNotFound):
                    continue  # partial failure: leave for the next sweep
        return reclaimed

    def _reclaim(self, inst: Instance) -> None:
        self._transition(inst, "Stopping")
        if inst.workload_id is not None:
            try:
                self._runner.stop_workload(inst.workload_id)
            except RunnerError:
                pass  # already gone: stop is confirmed either way
        # identity deleted only after the workload stop is confirmed
        if inst.identity_id is not None:
            try:
                self._identity.delete_identity(inst.identity_id)
            except IdentityNotFound:
                pass
        inst.identity_id = None
        inst.workload_id = None
        self._transition(inst, "Stopped")
        self._release_live(inst)

    # -- recovery ---------------------------------------------------------

    def recover(self, live_workloads: list[str], now: Optional[int] = None) -> list[dict]:
        """Restore instance invariants after a restart.

        Orphan workloads (no live instance record) are stopped; live
        records without a workload are failed and their identities
        deleted.
        """
        now = self._clock.now_ms() if now is None else now
        actions = []
        live = [i for i in self.list_instances() if i.state in LIVE_STATES]
        referenced = {i.workload_id for i in live if i.workload_id}
        for wid in live_workloads:
            if wid not in referenced:
                try:
                    self._runner.stop_workload(wid)
                except RunnerError as e:
                    raise RunnerUnavailable(str(e)) from e
                actions.append({"stop": wid})
        workload_set = set(live_workloads)
        for inst in live:
            if inst.workload_id is None or inst.workload_id not in workload_set:
                if inst.identity_id is not None:
                    try:
                        self._identity.delete_identity(inst.identity_id)
                    except IdentityNotFound:
                        pass
                inst.identity_id = None
                inst.workload_id = None
                self._force_state(inst, "Failed")
                self._release_live(inst)
                actions.append({"fail": inst.instance_id})
        return actions

    # -- background loops -------------------------------------------------

    def start(self) -> None:
        sub = self._bus.subscribe("thread.message", "orchestrator")

        def consume():
            while not self._stop.is_set():
                ev = sub.get(timeout=0.2)
                if ev is None:
                    continue
                try:
                    self.handle_message_event(ev)
                except (SpawnFailed, Exception):
                    pass  # failure already recorded and published
                sub.ack(ev.id)

        def sweep():
            while not self._stop.is_set():
                self.sweep_idle()
                self._stop.wait(self.sweep_period_s)

        for fn, name in ((consume, "orch-consume"), (sweep, "orch-sweep")):
            t = threading.Thread(target=fn, daemon=True, name=name)
            t.start()
            self._workers.append(t)
        self._sub = sub

    def stop(self) -> None:
        self._stop.set()
        if hasattr(self, "_sub"):
            self._sub.close()
        for t in self._workers:
            t.join(timeout=2)

    # -- queries ----------------------------------------------------------

    def get_instance(self, instance_id: str) -> Instance:
        rec = self._store.get_or_none(f"instance/rec/{instance_id}")
        if rec is None:
            raise UnknownInstance(instance_id)
        return Instance.from_doc(json.loads(rec[0]))

    def list_instances(self) -> list[Instance]:
        return [
            Instance.from_doc(json.loads(v))
            for _, v, _ in self._store.scan("instance/rec/")
        ]

    def live_instance_for(self, agent_id: str, thread_id: str) -> Optional[Instance]:
        return self._live_instance(agent_id, thread_id)

    # -- internals --------------------------------------------------------

    def _thread_lock(self, thread_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._thread_locks.setdefault(thread_id, threading.Lock())

    def _live_key(self, agent_id: str, thread_id: str) -> str:
        return f"instance/live/{agent_id}/{thread_id}"

    def _live_instance(self, agent_id: str, thread_id: str) -> Optional[Instance]:
        rec = self._store.get_or_none(self._live_key(agent_id, thread_id))
        if rec is None:
            return None
        inst = self.get_instance(rec[0].decode())
        return inst if inst.state in LIVE_STATES else None

    def _release_live(self, inst: Instance) -> None:
        key = self._live_key(inst.agent_id, inst.thread_id)
        rec = self._store.get_or_none(key)
        if rec is not None and rec[0].decode() == inst.instance_id:
            try:
                self._store.delete(key, rec[1])
            except VersionConflict:
                pass

    def _save(self, inst: Instance) -> None:
        key = f"instance/rec/{inst.instance_id}"
        while True:
            rec = self._store.get_or_none(key)
            try:
                self._store.put(key, json.dumps(inst.to_doc()).encode(), rec[1] if rec else 0)
                return
            except VersionConflict:
                continue

    def _transition(self, inst: Instance, new_state: str) -> None:
        if new_state not in _TRANSITIONS[inst.state]:
            raise OrchestratorError(f"illegal transition {inst.state} -> {new_state}")
        inst.state = new_state
        self._save(inst)
        self._emit_state(inst)

    def _force_state(self, inst: Instance, new_state: str) -> None:
        inst.state = new_state
        self._save(inst)
        self._emit_state(inst)

    def _emit_state(self, inst: Instance) -> None:
        self._bus.publish(
            "instance.state",
            {
                "instance_id": inst.instance_id,
                "agent_id": inst.agent_id,
                "thread_id": inst.thread_id,
                "state": inst.state,
                "ts": self._clock.now_ms(),
            },
        )

    def _mark_processed(self, event_id: str) -> None:
        self._processed.add(event_id)
        self._store.put(f"orch/processed/{event_id}", b"1")
        if len(self._processed) > PROCESSED_RETENTION:
            for key, _, ver in self._store.scan("orch/processed/")[
                : len(self._processed) - PROCESSED_RETENTION
            ]:
                try:
                    self._store.delete(key, ver)
                except Exception:
                    pass
                self._processed.discard(key.rsplit("/", 1)[1])
