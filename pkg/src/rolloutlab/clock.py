"""Injectable virtual clock so control flows are deterministic under test."""

from __future__ import annotations

import threading
import time


class VirtualClock:
    """Manually advanced clock; monotonic, starts at zero."""

    def __init__(self, start: float = 0.0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += dt
            return self._now


class WallClock:
    """Real-time clock with the same interface (advance sleeps)."""

    def __init__(self):
        self._t0 = time.monotonic()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def advance(self, dt: float) -> float:
        if dt > 0:
            time.sleep(dt)
        return self.now()
