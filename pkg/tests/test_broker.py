import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alertflow.broker import MAX_MESSAGE_BYTES, Broker, Message, Subscription
from alertflow.errors import (
    AlreadyExists,
    InvalidName,
    MessageTooLarge,
    NotDelivered,
    NotInFlight,
    UnknownSubscription,
    UnknownTopic,
)


def msg(payload=b"x", **kw):
    return Message(payload=payload, **kw)


class TestTopics:
    def test_create_fresh_topic(self):
        b = Broker()
        t = b.create_topic("L2.converted")
        assert t.name == "L2.converted"
        assert t.end_offset == 0

    def test_create_twice_rejected(self):
        b = Broker()
        b.create_topic("L2.converted")
        with pytest.raises(AlreadyExists):
            b.create_topic("L2.converted")

    def test_empty_name_rejected(self):
        with pytest.raises(InvalidName):
            Broker().create_topic("")

    def test_publish_to_unknown_topic(self):
        with pytest.raises(UnknownTopic):
            Broker().publish("nope", msg())

    def test_poll_unknown_subscription(self):
        b = Broker()
        b.create_topic("t")
        with pytest.raises(UnknownSubscription):
            b.poll(Subscription(topic="t", group_id="never-subscribed"), 1)


class TestPublishBatch:
    def test_consecutive_offsets(self):
        b = Broker()
        b.create_topic("t")
        assert b.publish_batch("t", [msg(), msg(), msg()]) == [0, 1, 2]

    def test_oversized_message_rolls_back_batch(self):
        b = Broker()
        b.create_topic("t")
        batch = [msg(), msg(), msg(payload=b"z" * (2 * 1024 * 1024))]
        with pytest.raises(MessageTooLarge):
            b.publish_batch("t", batch)
        assert b.end_offset("t") == 0
        sub = b.subscribe("t", "g")
        assert b.poll(sub, 10) == []

    def test_empty_batch(self):
        b = Broker()
        b.create_topic("t")
        assert b.publish_batch("t", []) == []
        assert b.end_offset("t") == 0

    def test_payload_at_cap_accepted(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", msg(payload=b"x" * MAX_MESSAGE_BYTES))
        with pytest.raises(MessageTooLarge):
            b.publish("t", msg(payload=b"x" * (MAX_MESSAGE_BYTES + 1)))


class TestPollCommit:
    def _setup(self, n=5):
        b = Broker()
        b.create_topic("t")
        b.publish_batch("t", [msg(payload=bytes([i])) for i in range(n)])
        return b, b.subscribe("t", "g")

    def test_poll_in_offset_order(self):
        b, sub = self._setup()
        got = b.poll(sub, 3)
        assert [m.offset for m in got] == [0, 1, 2]

    def test_poll_empty_topic(self):
        b = Broker()
        b.create_topic("t")
        sub = b.subscribe("t", "g")
        assert b.poll(sub, 5) == []

    def test_poll_after_commit_resumes_at_high_water_mark(self):
        b, sub = self._setup()
        b.poll(sub, 3)
        b.commit(sub, 2)
        assert [m.offset for m in b.poll(sub, 3)] == [3, 4]

    def test_partial_commit_releases_the_rest(self):
        b, sub = self._setup(3)
        b.poll(sub, 3)
        b.commit(sub, 1)
        assert [m.offset for m in b.poll(sub, 3)] == [2]

    def test_commit_undelivered_offset(self):
        b, sub = self._setup()
        b.poll(sub, 3)
        with pytest.raises(NotDelivered):
            b.commit(sub, 7)

    def test_commit_idempotent(self):
        b, sub = self._setup()
        b.poll(sub, 3)
        b.commit(sub, 1)
        b.commit(sub, 1)
        assert b.committed_offset(sub) == 2

    def test_in_flight_not_redelivered(self):
        b, sub = self._setup()
        b.poll(sub, 2)
        assert [m.offset for m in b.poll(sub, 2)] == [2, 3]

    def test_groups_are_independent(self):
        b, sub = self._setup(2)
        other = b.subscribe("t", "h")
        b.poll(sub, 2)
        b.commit(sub, 1)
        assert [m.offset for m in b.poll(other, 5)] == [0, 1]


class TestAck:
    def test_out_of_order_ack_leaves_others_in_flight(self):
        b = Broker()
        b.create_topic("t")
        b.publish_batch("t", [msg(), msg(), msg()])
        sub = b.subscribe("t", "g")
        b.poll(sub, 3)
        b.ack(sub, 2)
        b.ack(sub, 0)
        # offset 1 is still in flight: nothing deliverable, nothing lost
        assert b.poll(sub, 3) == []
        b.nack(sub, 1)
        assert [m.offset for m in b.poll(sub, 3)] == [1]

    def test_ack_not_in_flight(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", msg())
        sub = b.subscribe("t", "g")
        with pytest.raises(NotInFlight):
            b.ack(sub, 0)


class TestNack:
    def test_nack_redelivers(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", msg(payload=b"p"))
        sub = b.subscribe("t", "g")
        [m] = b.poll(sub, 1)
        b.nack(sub, m.offset)
        assert b.retry_count(sub, 0) == 1
        [again] = b.poll(sub, 1)
        assert again.offset == 0
        assert again.payload == b"p"

    def test_retry_count_accumulates(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", msg())
        sub = b.subscribe("t", "g")
        b.poll(sub, 1)
        b.nack(sub, 0)
        b.poll(sub, 1)
        b.nack(sub, 0)
        assert b.retry_count(sub, 0) == 2

    def test_nack_never_delivered(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", msg())
        sub = b.subscribe("t", "g")
        with pytest.raises(NotInFlight):
            b.nack(sub, 0)

    def test_dead_letter_after_max_retries(self):
        b = Broker(max_retries=3)
        b.create_topic("t")
        b.publish("t", msg(payload=b"poison", headers={"receipt-id": "r1"}))
        sub = b.subscribe("t", "g")
        for _ in range(3):
            [m] = b.poll(sub, 1)
            b.nack(sub, m.offset)
        # exhausted: offset resolved, message parked on the DLQ
        assert b.poll(sub, 1) == []
        assert b.committed_offset(sub) == 1
        dead = b.read("t.dlq")
        assert len(dead) == 1
        assert dead[0].payload == b"poison"
        assert dead[0].headers["dlq-reason"] == "max-retries"
        assert dead[0].headers["receipt-id"] == "r1"


class TestConcurrency:
    def test_concurrent_publishers_dense_offsets(self):
        b = Broker()
        b.create_topic("t")
        errors = []

        def worker(k):
            try:
                for i in range(100):
                    b.publish("t", msg(payload=f"{k}:{i}".encode()))
            except Exception as e:  # pragma: no cover
                errors.append(e)

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert b.end_offset("t") == 800
        stored = b.read("t")
        assert [m.offset for m in stored] == list(range(800))
        assert len({m.payload for m in stored}) == 800

    def test_single_group_exclusive_inflight(self):
        b = Broker()
        b.create_topic("t")
        b.publish_batch("t", [msg(payload=bytes([i])) for i in range(200)])
        sub = b.subscribe("t", "g")
        seen = []
        lock = threading.Lock()

        def consumer():
            while True:
                got = b.poll(sub, 7)
                if not got:
                    return
                with lock:
                    seen.extend(m.offset for m in got)
                b.ack(sub, [m.offset for m in got])

        threads = [threading.Thread(target=consumer) for _ in range(6)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(seen) == list(range(200))  # each offset delivered exactly once
        assert b.committed_offset(sub) == 200

    def test_blocking_poll_wakes_on_publish(self):
        b = Broker()
        b.create_topic("t")
        sub = b.subscribe("t", "g")
        out = []

        def consumer():
            out.extend(b.poll(sub, 1, timeout=5.0))

        th = threading.Thread(target=consumer)
        th.start()
        b.publish("t", msg(payload=b"hello"))
        th.join(timeout=5)
        assert not th.is_alive()
        assert out and out[0].payload == b"hello"


class TestBatchAtomicityProperty:
    @settings(max_examples=60, deadline=None)
    @given(
        sizes=st.lists(st.integers(min_value=0, max_value=100), min_size=1, max_size=6),
        bad_pos=st.integers(min_value=0, max_value=5),
    )
    def test_no_partial_batch_ever_visible(self, sizes, bad_pos):
        b = Broker()
        b.create_topic("t")
        good = [msg(payload=b"a" * s) for s in sizes]
        before = b.publish_batch("t", good)
        assert before == list(range(len(sizes)))

        bad = list(good)
        bad.insert(min(bad_pos, len(bad)), msg(payload=b"z" * (MAX_MESSAGE_BYTES + 1)))
        end_before = b.end_offset("t")
        with pytest.raises(MessageTooLarge):
            b.publish_batch("t", bad)
        assert b.end_offset("t") == end_before
        sub = b.subscribe("t", "fresh")
        visible = b.poll(sub, 1000)
        assert len(visible) == len(sizes)


class TestNoLossProperty:
    @settings(max_examples=100, deadline=None)
    @given(
        n_messages=st.integers(min_value=1, max_value=12),
        ops=st.lists(
            st.tuples(st.sampled_from(["poll", "nack", "commit", "ack"]),
                      st.integers(min_value=0, max_value=11)),
            max_size=40,
        ),
    )
    def test_every_offset_consumed_or_still_deliverable(self, n_messages, ops):
        """Arbitrary poll/nack/commit/ack interleavings never strand an
        offset: afterwards, draining delivers exactly the unconsumed ones."""
        b = Broker(max_retries=1000)  # keep the DLQ out of this property
        b.create_topic("t")
        b.publish_batch("t", [msg(payload=bytes([i])) for i in range(n_messages)])
        sub = b.subscribe("t", "g")
        held: set[int] = set()
        consumed: set[int] = set()
        for op, arg in ops:
            if op == "poll":
                got = b.poll(sub, (arg % 4) + 1)
                held.update(m.offset for m in got)
            elif op == "nack" and held:
                off = sorted(held)[arg % len(held)]
                b.nack(sub, off)
                held.discard(off)
            elif op == "ack" and held:
                off = sorted(held)[arg % len(held)]
                b.ack(sub, off)
                held.discard(off)
                consumed.add(off)
            elif op == "commit" and held:
                through = sorted(held)[arg % len(held)]
                b.commit(sub, through)
                consumed.update(o for o in range(through + 1))
                # position commit: everything <= through is consumed, and the
                # broker takes back anything held above it for redelivery
                held = set()
        # release whatever the "consumer" still holds, then drain
        for off in sorted(held):
            b.nack(sub, off)
        drained = set()
        while True:
            got = b.poll(sub, 100)
            if not got:
                break
            for m in got:
                drained.add(m.offset)
                b.ack(sub, m.offset)
        assert consumed | drained == set(range(n_messages))
        assert b.committed_offset(sub) == n_messages


class TestRetentionAndPersistence:
    def test_vacuum_respects_floor_and_groups(self):
        b = Broker(retention_floor=2)
        b.create_topic("t")
        b.publish_batch("t", [msg(payload=bytes([i])) for i in range(10)])
        sub = b.subscribe("t", "g")
        got = b.poll(sub, 10)
        b.commit(sub, got[-1].offset)
        removed = b.vacuum("t")
        assert removed == 8  # keeps the floor of 2 below the committed mark
        assert [m.offset for m in b.read("t")] == [8, 9]

    def test_vacuum_waits_for_all_groups(self):
        b = Broker()
        b.create_topic("t")
        b.publish_batch("t", [msg() for _ in range(4)])
        fast = b.subscribe("t", "fast")
        b.subscribe("t", "slow")
        b.poll(fast, 4)
        b.commit(fast, 3)
        assert b.vacuum("t") == 0

    def test_restart_round_trips_payloads(self, tmp_path):
        payloads = [b"", b"\x00\xffbinary\x01", "unicode ✓".encode("utf-8")]
        b = Broker(data_dir=tmp_path)
        b.create_topic("t")
        for p in payloads:
            b.publish("t", msg(payload=p, key="k", headers={"receipt-id": "r"}))
        b.close()

        b2 = Broker(data_dir=tmp_path)
        stored = b2.read("t")
        assert [m.payload for m in stored] == payloads
        assert all(m.headers == {"receipt-id": "r"} for m in stored)
        assert b2.end_offset("t") == 3
        # appends continue at the right offset after restart
        assert b2.publish("t", msg()) == 3
