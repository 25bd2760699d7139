"""Injectable clocks.

Components that need time take a clock at construction so that tests (and
the harness's fast acceptance runs) can drive timers and arrival pacing
without real sleeping. Two implementations share one small interface:

    now() -> float
        Current time in seconds. Monotonic within one clock instance.
    wait_until(deadline, interrupt=None) -> bool
        Block until now() >= deadline. Returns True when the deadline was
        reached, False when the interrupt event fired first.
    kick()
        Wake every waiter so it can re-check its interrupt/deadline.
"""

from __future__ import annotations

import threading
import time


class SystemClock:
    """Wall clock backed by time.monotonic."""

    def now(self) -> float:
        return time.monotonic()

    def wait_until(self, deadline: float, interrupt: threading.Event | None = None) -> bool:
        while True:
            remaining = deadline - self.now()
            if remaining <= 0:
                return True
            if interrupt is None:
                time.sleep(min(remaining, 0.05))
            elif interrupt.wait(timeout=remaining):
                return False

    def kick(self) -> None:
        pass  # waiters poll or sit on their interrupt event directly


class SimulatedClock:
    """Manually advanced clock; waiters block until advance() moves time."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._cond = threading.Condition()

    def now(self) -> float:
        with self._cond:
            return self._now

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot move a clock backwards")
        with self._cond:
            self._now += seconds
            self._cond.notify_all()

    def advance_to(self, timestamp: float) -> None:
        with self._cond:
            if timestamp > self._now:
                self._now = timestamp
            self._cond.notify_all()

    def wait_until(self, deadline: float, interrupt: threading.Event | None = None) -> bool:
        with self._cond:
            while self._now < deadline:
                if interrupt is not None and interrupt.is_set():
                    return False
                # Short timeout so an interrupt set without a kick() is still
                # noticed promptly.
                self._cond.wait(timeout=0.05)
            return True

    def kick(self) -> None:
        with self._cond:
            self._cond.notify_all()
