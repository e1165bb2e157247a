"""Pub/sub bus with consumer groups and at-least-once delivery.

Events are persisted to the store before publish returns; consumer-group
progress (a low-water mark plus acked ids above it) is persisted too, so
a consumer that crashes between delivery and ack sees the event again
after it resubscribes, even across process restarts.

Delivered-but-unacked events are redelivered after a timeout (default
5 s). Consumers must therefore be idempotent; the event id is the dedup
key.

Fixed topics: thread.message, instance.state, identity.change,
config.applied (payload schemas in docs/events.md).
"""

from __future__ import annotations

import json
import threading
import time as _time
from collections import deque
from dataclasses import dataclass
from typing import Optional

from .clock import Clock, SystemClock
from .store import Store, VersionConflict

TOPICS = ("thread.message", "instance.state", "identity.change", "config.applied")

DEFAULT_REDELIVERY_TIMEOUT_S = 5.0


@dataclass(frozen=True)
class Event:
    id: str
    topic: str
    payload: dict
    ts: int
    seq: int


def _event_key(topic: str, seq: int) -> str:
    return f"bus/event/{topic}/{seq:012d}"


def _group_key(topic: str, group: str) -> str:
    return f"bus/group/{topic}/{group}"


class _GroupState:
    """Shared delivery state for one (topic, group)."""

    def __init__(self, topic: str, group: str, store: Store):
        self.topic = topic
        self.group = group
        self._store = store
        self.cond = threading.Condition()
        self.pending: deque[Event] = deque()  # seq-ordered, not yet delivered
        self.inflight: dict[str, tuple[Event, int]] = {}  # id -> (event, deadline ms)
        self.start_seq = 0
        self.floor = 0  # every seq <= floor is acked
        self.acked: set[int] = set()  # acked seqs above floor

    def load(self) -> None:
        rec = self._store.get_or_none(_group_key(self.topic, self.group))
        if rec is None:
            return
        doc = json.loads(rec[0])
        self.start_seq = doc["start_seq"]
        self.floor = doc["floor"]
        self.acked = set(doc["acked"])

    def persist(self) -> None:
        doc = {
            "start_seq": self.start_seq,
            "floor": self.floor,
            "acked": sorted(self.acked),
        }
        body = json.dumps(doc).encode()
        while True:
            rec = self._store.get_or_none(_group_key(self.topic, self.group))
            try:
                self._store.put(
                    _group_key(self.topic, self.group),
                    body,
                    rec[1] if rec else 0,
                )
                return
            except VersionConflict:
                continue

    def is_acked(self, seq: int) -> bool:
        return seq <= self.floor or seq in self.acked

    def mark_acked(self, seq: int) -> None:
        self.acked.add(seq)
        while self.floor + 1 in self.acked:
            self.floor += 1
            self.acked.discard(self.floor)
        self.persist()


class Subscription:
    """Handle returned by subscribe(): a blocking event stream plus ack."""

    def __init__(self, bus: "EventBus", state: _GroupState):
        self._bus = bus
        self._state = state
        self._closed = False

    def get(self, timeout: Optional[float] = None) -> Optional[Event]:
        """Next deliverable event, or None when the timeout expires.

        Redelivery-due inflight events take priority over fresh ones so a
        stuck event cannot starve behind a busy topic. The wait polls at
        50 ms so redelivery deadlines are noticed even under a manual
        clock that advances without notifying the condition.
        """
        st = self._state
        end = _time.monotonic() + timeout if timeout is not None else None
        with st.cond:
            while True:
                if self._closed:
                    return None
                now = self._bus._clock.now_ms()
                expired = sorted(
                    (
                        ev
                        for ev, dl in st.inflight.values()
                        if dl <= now and not st.is_acked(ev.seq)
                    ),
                    key=lambda e: e.seq,
                )
                if expired:
                    ev = expired[0]
                else:
                    while st.pending and st.is_acked(st.pending[0].seq):
                        st.pending.popleft()
                    if st.pending:
                        ev = st.pending.popleft()
                    else:
                        if end is not None:
                            remaining = end - _time.monotonic()
                            if remaining <= 0:
                                return None
                            st.cond.wait(timeout=min(remaining, 0.05))
                        else:
                            st.cond.wait(timeout=0.05)
                        continue
                st.inflight[ev.id] = (
                    ev,
                    now + int(self._bus.redelivery_timeout_s * 1000),
                )
                return ev

    def ack(self, event_id: str) -> None:
        st = self._state
        with st.cond:
            entry = st.inflight.pop(event_id, None)
            if entry is not None:
                st.mark_acked(entry[0].seq)
            else:
                # ack for an event delivered before a restart
                seq = EventBus.seq_of(event_id)
                if not st.is_acked(seq):
                    st.mark_acked(seq)

    def close(self) -> None:
        with self._state.cond:
            self._closed = True
            self._state.cond.notify_all()


class EventBus:
    """Durable pub/sub fan-out over the shared store."""

    def __init__(
        self,
        store: Store,
        clock: Optional[Clock] = None,
        redelivery_timeout_s: float = DEFAULT_REDELIVERY_TIMEOUT_S,
    ):
        self._store = store
        self._clock = clock or SystemClock()
        self.redelivery_timeout_s = redelivery_timeout_s
        self._lock = threading.Lock()
        self._groups: dict[tuple[str, str], _GroupState] = {}
        self._watchers: list = []  # callables (Event) -> None, fire-and-forget

    @staticmethod
    def seq_of(event_id: str) -> int:
        return int(event_id.split("-", 1)[1])

    def publish(self, topic: str, payload: dict) -> str:
        if not topic:
            raise ValueError("topic must be non-empty")
        with self._lock:
            seq = self._next_seq()
            ev = Event(
                id=f"ev-{seq:06d}",
                topic=topic,
                payload=payload,
                ts=self._clock.now_ms(),
                seq=seq,
            )
            body = json.dumps(
                {"id": ev.id, "topic": topic, "payload": payload, "ts": ev.ts}
            ).encode()
            self._store.put(_event_key(topic, seq), body)
            groups = [g for (t, _), g in self._groups.items() if t == topic]
            watchers = list(self._watchers)
        for g in groups:
            with g.cond:
                g.pending.append(ev)
                g.cond.notify_all()
        for w in watchers:
            w(ev)
        return ev.id

    def subscribe(self, topic: str, group: str) -> Subscription:
        """Join (or create) a consumer group on a topic.

        A new group starts at the current head; a known group resumes with
        every event published since it was created that it has not acked.
        """
        with self._lock:
            key = (topic, group)
            st = self._groups.get(key)
            if st is None:
                st = _GroupState(topic, group, self._store)
                existing = self._store.get_or_none(_group_key(topic, group))
                if existing is not None:
                    st.load()
                    self._backfill(st)
                else:
                    st.start_seq = self._current_seq()
                    st.floor = st.start_seq
                    st.persist()
                self._groups[key] = st
            return Subscription(self, st)

    def add_watcher(self, fn) -> None:
        """Register a best-effort observer of every published event.

        Watchers get no redelivery and no ack; they exist for live feeds
        (the gateway SSE stream), not for consumers that need the
        at-least-once contract.
        """
        with self._lock:
            self._watchers.append(fn)

    def remove_watcher(self, fn) -> None:
        with self._lock:
            if fn in self._watchers:
                self._watchers.remove(fn)

    # -- internals --------------------------------------------------------

    def _backfill(self, st: _GroupState) -> None:
        for key, value, _ in self._store.scan(f"bus/event/{st.topic}/"):
            seq = int(key.rsplit("/", 1)[1])
            if seq > st.start_seq and not st.is_acked(seq):
                doc = json.loads(value)
                st.pending.append(
                    Event(
                        id=doc["id"],
                        topic=doc["topic"],
                        payload=doc["payload"],
                        ts=doc["ts"],
                        seq=seq,
                    )
                )

    def _next_seq(self) -> int:
        while True:
            rec = self._store.get_or_none("bus/seq")
            cur = int(rec[0]) if rec else 0
            try:
                self._store.put("bus/seq", str(cur + 1).encode(), rec[1] if rec else 0)
                return cur + 1
            except VersionConflict:
                continue

    def _current_seq(self) -> int:
        rec = self._store.get_or_none("bus/seq")
        return int(rec[0]) if rec else 0
