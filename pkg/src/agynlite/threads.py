"""Threads and messages: the conversational unit and the spawn signal.

A thread binds a creator to an agent; posting a message stores it durably
and publishes a `thread.message` event, which is what wakes the
orchestrator.
"""

from __future__ import annotations

import json
import secrets
import threading
from typing import Optional

from .clock import Clock, SystemClock
from .events import EventBus
from .store import Store, NotFound, VersionConflict


class ThreadNotFound(Exception):
    pass


class ThreadService:
    def __init__(self, store: Store, bus: EventBus, clock: Optional[Clock] = None):
        self._store = store
        self._bus = bus
        self._clock = clock or SystemClock()
        self._lock = threading.Lock()

    def create_thread(self, agent_id: str, creator: str) -> str:
        thread_id = f"t-{secrets.token_hex(6)}"
        doc = {
            "thread_id": thread_id,
            "agent_id": agent_id,
            "creator": creator,
            "created_ts": self._clock.now_ms(),
        }
        self._store.put(f"thread/{thread_id}/meta", json.dumps(doc).encode())
        return thread_id

    def get_thread(self, thread_id: str) -> dict:
        rec = self._store.get_or_none(f"thread/{thread_id}/meta")
        if rec is None:
            raise ThreadNotFound(thread_id)
        return json.loads(rec[0])

    def list_threads(self) -> list[dict]:
        return [
            json.loads(v)
            for k, v, _ in self._store.scan("thread/")
            if k.endswith("/meta")
        ]

    def post_message(self, thread_id: str, sender: str, text: str) -> dict:
        self.get_thread(thread_id)
        with self._lock:
            seq_key = f"thread/{thread_id}/msgseq"
            while True:
                rec = self._store.get_or_none(seq_key)
                seq = int(rec[0]) if rec else 0
                try:
                    self._store.put(seq_key, str(seq + 1).encode(), rec[1] if rec else 0)
                    break
                except VersionConflict:
                    continue
            seq += 1
            msg = {
                "id": f"{thread_id}-m{seq:06d}",
                "thread_id": thread_id,
                "sender": sender,
                "text": text,
                "ts": self._clock.now_ms(),
            }
            self._store.put(
                f"thread/{thread_id}/msg/{seq:08d}", json.dumps(msg).encode()
            )
        self._bus.publish(
            "thread.message",
            {"thread": thread_id, "msg": msg["id"], "sender": sender, "text": text},
        )
        return msg

    def list_messages(self, thread_id: str) -> list[dict]:
        self.get_thread(thread_id)
        return [
            json.loads(v) for _, v, _ in self._store.scan(f"thread/{thread_id}/msg/")
        ]

    def recent_messages(self, thread_id: str, limit: int = 20) -> list[dict]:
        return self.list_messages(thread_id)[-limit:]
