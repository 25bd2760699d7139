import threading
import time

import pytest

from alertflow.clock import SimulatedClock, SystemClock


class TestSimulatedClock:
    def test_starts_where_told_and_advances(self):
        clock = SimulatedClock(start=100.0)
        assert clock.now() == 100.0
        clock.advance(2.5)
        assert clock.now() == 102.5
        clock.advance_to(200.0)
        assert clock.now() == 200.0
        clock.advance_to(150.0)  # never goes backwards
        assert clock.now() == 200.0

    def test_negative_advance_rejected(self):
        with pytest.raises(ValueError):
            SimulatedClock().advance(-1)

    def test_wait_until_blocks_until_advanced(self):
        clock = SimulatedClock()
        reached = []

        def waiter():
            reached.append(clock.wait_until(10.0))

        th = threading.Thread(target=waiter)
        th.start()
        time.sleep(0.05)
        assert not reached  # still waiting
        clock.advance(10.0)
        th.join(timeout=5)
        assert reached == [True]

    def test_wait_until_interruptible(self):
        clock = SimulatedClock()
        interrupt = threading.Event()
        out = []

        def waiter():
            out.append(clock.wait_until(1000.0, interrupt=interrupt))

        th = threading.Thread(target=waiter)
        th.start()
        interrupt.set()
        clock.kick()
        th.join(timeout=5)
        assert out == [False]


class TestSystemClock:
    def test_monotone(self):
        clock = SystemClock()
        a = clock.now()
        b = clock.now()
        assert b >= a

    def test_wait_until_past_deadline_returns_immediately(self):
        clock = SystemClock()
        assert clock.wait_until(clock.now() - 1.0) is True

    def test_wait_until_interrupt_wins(self):
        clock = SystemClock()
        interrupt = threading.Event()
        interrupt.set()
        assert clock.wait_until(clock.now() + 30.0, interrupt=interrupt) is False
