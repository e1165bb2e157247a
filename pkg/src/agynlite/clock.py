"""Injectable time source: wall clock in production, manual clock in tests."""

from __future__ import annotations

import threading
import time


class Clock:
    """Millisecond clock interface."""

    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep(self, seconds: float) -> None:
        raise NotImplementedError


class SystemClock(Clock):
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class ManualClock(Clock):
    """Deterministic clock advanced explicitly by tests.

    sleep() advances time instead of blocking, so timing-dependent code
    can run under virtual time.
    """

    def __init__(self, start_ms: int = 0):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> None:
        with self._lock:
            self._now += ms

    def set(self, now_ms: int) -> None:
        with self._lock:
            if now_ms < self._now:
                raise ValueError("manual clock cannot go backwards")
            self._now = now_ms

    def sleep(self, seconds: float) -> None:
        self.advance(int(seconds * 1000))
