"""Embedded publish-subscribe broker.

Append-only topic logs with dense offsets, consumer groups, atomic batch
publish, and nack-driven redelivery with a dead-letter escape hatch.

Semantics worth spelling out:

* ``publish_batch`` is all-or-nothing: if any message in the batch is
  oversized the whole batch is rejected and nothing becomes visible.
* ``poll`` hands out the lowest offsets that are neither resolved nor
  currently held by the group; delivered offsets become in-flight.
* ``commit(through)`` is a position-style cumulative commit: everything at
  or below ``through`` is consumed, and any in-flight offset above it is
  released back for redelivery. This matches the familiar "set the group's
  position" model and is meant for single-threaded consumers.
* ``ack(offsets)`` resolves exactly the given in-flight offsets and is safe
  for many concurrent consumers of one group completing out of order (the
  trigger dispatcher uses it in ack mode).
* ``nack`` returns an in-flight offset for redelivery; after ``max_retries``
  nacks the message is published to ``<topic>.dlq`` instead and the offset
  is resolved, so a poison message cannot wedge a group forever.

Optionally persists topic logs under ``data_dir/topics/<topic>/log.jsonl``
(payloads base64-encoded, bit-exact across restarts) plus each group's
committed position, so a restarted process resumes where it left off and
redelivers only what was genuinely in flight.
"""

from __future__ import annotations

import base64
import heapq
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    AlreadyExists,
    InvalidName,
    MessageTooLarge,
    NotDelivered,
    NotInFlight,
    UnknownSubscription,
    UnknownTopic,
)

logger = logging.getLogger(__name__)

MAX_MESSAGE_BYTES = 1_048_576

HEADER_RECEIPT_ID = "receipt-id"
HEADER_INGRESS_TS = "ingress-ts"


@dataclass(frozen=True)
class Message:
    """One record on a topic. ``offset`` is assigned by the broker on append."""

    payload: bytes
    key: str | None = None
    headers: dict[str, str] = field(default_factory=dict)
    topic: str = ""
    offset: int = -1

    def receipt_id(self) -> str:
        return self.headers.get(HEADER_RECEIPT_ID, "")


class _TopicLog:
    def __init__(self, name: str):
        self.name = name
        self.messages: dict[int, Message] = {}
        self.end_offset = 0
        self.first_retained = 0
        self.groups: dict[str, _GroupState] = {}
        self.stored_positions: dict[str, int] = {}  # committed marks from disk


class _GroupState:
    """Per (topic, group) delivery bookkeeping."""

    def __init__(self, start_offset: int):
        self.next_fresh = start_offset   # lowest offset never delivered
        self.committed = start_offset    # exclusive high-water mark
        self.inflight: set[int] = set()
        self.redeliver: list[int] = []   # heap of released offsets
        self.done: set[int] = set()      # resolved offsets >= committed
        self.retries: dict[int, int] = {}

    def pending(self, end_offset: int) -> int:
        return (end_offset - self.next_fresh) + len(self.redeliver) + len(self.inflight)

    def advance(self) -> None:
        while self.committed in self.done:
            self.done.discard(self.committed)
            self.committed += 1


@dataclass(frozen=True)
class Subscription:
    """Handle identifying one consumer group's attachment to a topic."""

    topic: str
    group_id: str


class TopicHandle:
    """Read-only view of a topic returned by create_topic."""

    def __init__(self, broker: "Broker", name: str):
        self._broker = broker
        self.name = name

    @property
    def end_offset(self) -> int:
        return self._broker.end_offset(self.name)

    def __repr__(self) -> str:
        return f"TopicHandle({self.name!r})"


class Broker:
    def __init__(
        self,
        data_dir: str | Path | None = None,
        max_message_bytes: int = MAX_MESSAGE_BYTES,
        max_retries: int = 5,
        retention_floor: int = 0,
    ):
        self.max_message_bytes = max_message_bytes
        self.max_retries = max_retries
        self.retention_floor = retention_floor
        self._topics: dict[str, _TopicLog] = {}
        self._lock = threading.RLock()
        self._conds: dict[str, threading.Condition] = {}
        self._data_dir = Path(data_dir) if data_dir is not None else None
        self._files: dict[str, object] = {}
        self._pos_files: dict[str, object] = {}
        if self._data_dir is not None:
            self._load()

    # -- topics -------------------------------------------------------------

    def create_topic(self, name: str) -> TopicHandle:
        self._check_name(name)
        with self._lock:
            if name in self._topics:
                raise AlreadyExists(f"topic {name!r} already exists")
            self._topics[name] = _TopicLog(name)
            self._conds[name] = threading.Condition(self._lock)
            if self._data_dir is not None:
                self._open_log_file(name)
        return TopicHandle(self, name)

    def ensure_topic(self, name: str) -> TopicHandle:
        with self._lock:
            if name not in self._topics:
                return self.create_topic(name)
        return TopicHandle(self, name)

    def topic_exists(self, name: str) -> bool:
        with self._lock:
            return name in self._topics

    def topic_names(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def end_offset(self, topic: str) -> int:
        return self._log(topic).end_offset

    def dlq_name(self, topic: str) -> str:
        return f"{topic}.dlq"

    # -- publishing ---------------------------------------------------------

    def publish(self, topic: str | TopicHandle, message: Message) -> int:
        return self.publish_batch(topic, [message])[0]

    def publish_batch(self, topic: str | TopicHandle, batch: list[Message]) -> list[int]:
        name = topic.name if isinstance(topic, TopicHandle) else topic
        with self._lock:
            log = self._log(name)
            for m in batch:
                if len(m.payload) > self.max_message_bytes:
                    raise MessageTooLarge(
                        f"payload of {len(m.payload)} bytes exceeds cap of "
                        f"{self.max_message_bytes} on topic {name!r}; batch rolled back"
                    )
            offsets = []
            for m in batch:
                off = log.end_offset
                stored = Message(
                    payload=m.payload,
                    key=m.key,
                    headers=dict(m.headers),
                    topic=name,
                    offset=off,
                )
                log.messages[off] = stored
                log.end_offset = off + 1
                offsets.append(off)
                self._persist(name, stored)
            if batch:
                self._flush(name)
                self._conds[name].notify_all()
        return offsets

    # -- consuming ----------------------------------------------------------

    def subscribe(self, topic: str, group_id: str) -> Subscription:
        with self._lock:
            log = self._log(topic)
            if group_id not in log.groups:
                start = max(log.first_retained, log.stored_positions.get(group_id, 0))
                log.groups[group_id] = _GroupState(start)
        return Subscription(topic=topic, group_id=group_id)

    def poll(self, sub: Subscription, max_n: int, timeout: float | None = None) -> list[Message]:
        """Deliver up to max_n messages in offset order.

        Non-blocking by default; with a timeout, blocks until at least one
        message is deliverable or the timeout elapses.
        """
        if max_n < 1:
            raise ValueError("max_n must be positive")
        with self._lock:
            cond = self._cond_for(sub)
            out = self._poll_locked(sub, max_n)
            if out or timeout is None:
                return out
            deadline = time.monotonic() + timeout
            while not out:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                cond.wait(timeout=remaining)
                out = self._poll_locked(sub, max_n)
            return out

    def _poll_locked(self, sub: Subscription, max_n: int) -> list[Message]:
        log, st = self._state(sub)
        out: list[Message] = []
        while st.redeliver and len(out) < max_n:
            off = heapq.heappop(st.redeliver)
            st.inflight.add(off)
            out.append(log.messages[off])
        while st.next_fresh < log.end_offset and len(out) < max_n:
            off = st.next_fresh
            st.next_fresh += 1
            st.inflight.add(off)
            out.append(log.messages[off])
        return out

    def commit(self, sub: Subscription, through_offset: int) -> None:
        """Consume everything <= through_offset; release in-flight above it."""
        with self._lock:
            log, st = self._state(sub)
            if through_offset >= st.next_fresh:
                raise NotDelivered(
                    f"offset {through_offset} was never delivered to group "
                    f"{sub.group_id!r} on {sub.topic!r}"
                )
            for off in [o for o in st.inflight if o <= through_offset]:
                st.inflight.discard(off)
                st.done.add(off)
                st.retries.pop(off, None)
            released = False
            for off in [o for o in st.inflight if o > through_offset]:
                st.inflight.discard(off)
                heapq.heappush(st.redeliver, off)
                released = True
            kept = []
            while st.redeliver:
                off = heapq.heappop(st.redeliver)
                if off <= through_offset:
                    st.done.add(off)
                    st.retries.pop(off, None)
                else:
                    kept.append(off)
            for off in kept:
                heapq.heappush(st.redeliver, off)
            before = st.committed
            st.advance()
            if st.committed != before:
                self._persist_position(sub.topic, sub.group_id, st.committed)
            if released:
                self._conds[sub.topic].notify_all()

    def ack(self, sub: Subscription, offsets: list[int] | int) -> None:
        """Resolve exactly these in-flight offsets (out-of-order safe)."""
        if isinstance(offsets, int):
            offsets = [offsets]
        with self._lock:
            _, st = self._state(sub)
            for off in offsets:
                if off not in st.inflight:
                    raise NotInFlight(f"offset {off} is not in flight for {sub.group_id!r}")
            for off in offsets:
                st.inflight.discard(off)
                st.done.add(off)
                st.retries.pop(off, None)
            before = st.committed
            st.advance()
            if st.committed != before:
                self._persist_position(sub.topic, sub.group_id, st.committed)

    def nack(self, sub: Subscription, offset: int) -> None:
        """Return an in-flight offset for redelivery; dead-letter after max_retries."""
        with self._lock:
            log, st = self._state(sub)
            if offset not in st.inflight:
                raise NotInFlight(f"offset {offset} is not in flight for {sub.group_id!r}")
            st.inflight.discard(offset)
            st.retries[offset] = st.retries.get(offset, 0) + 1
            if st.retries[offset] >= self.max_retries:
                msg = log.messages[offset]
                dlq = self.dlq_name(sub.topic)
                self.ensure_topic(dlq)
                headers = dict(msg.headers)
                headers["dlq-reason"] = "max-retries"
                headers["dlq-source-offset"] = str(offset)
                self.publish(dlq, Message(payload=msg.payload, key=msg.key, headers=headers))
                logger.warning(
                    "offset %d on %s exhausted %d retries; routed to %s",
                    offset, sub.topic, self.max_retries, dlq,
                )
                st.retries.pop(offset, None)
                st.done.add(offset)
                before = st.committed
                st.advance()
                if st.committed != before:
                    self._persist_position(sub.topic, sub.group_id, st.committed)
            else:
                heapq.heappush(st.redeliver, offset)
                self._conds[sub.topic].notify_all()

    def retry_count(self, sub: Subscription, offset: int) -> int:
        with self._lock:
            _, st = self._state(sub)
            return st.retries.get(offset, 0)

    def committed_offset(self, sub: Subscription) -> int:
        with self._lock:
            _, st = self._state(sub)
            return st.committed

    def pending(self, sub: Subscription) -> int:
        """Messages not yet resolved for this group (backlog + in flight)."""
        with self._lock:
            log, st = self._state(sub)
            return st.pending(log.end_offset)

    # -- non-consuming reads (tests, DLQ inspection, replay) -----------------

    def read(self, topic: str, start: int = 0, max_n: int | None = None) -> list[Message]:
        with self._lock:
            log = self._log(topic)
            out = []
            off = max(start, log.first_retained)
            while off < log.end_offset and (max_n is None or len(out) < max_n):
                out.append(log.messages[off])
                off += 1
            return out

    # -- retention ----------------------------------------------------------

    def vacuum(self, topic: str) -> int:
        """Drop messages consumed by every group, beyond the retention floor.

        Returns the number of messages removed. Topics with no groups are
        retained whole.
        """
        with self._lock:
            log = self._log(topic)
            if not log.groups:
                return 0
            floor = min(st.committed for st in log.groups.values()) - self.retention_floor
            removed = 0
            while log.first_retained < floor:
                if log.messages.pop(log.first_retained, None) is not None:
                    removed += 1
                log.first_retained += 1
            return removed

    # -- internals ------------------------------------------------------------

    @staticmethod
    def _check_name(name: str) -> None:
        if (
            not name
            or name in (".", "..")
            or "/" in name
            or any(c.isspace() for c in name)
        ):
            raise InvalidName(f"invalid topic name {name!r}")

    def _log(self, topic: str) -> _TopicLog:
        with self._lock:
            try:
                return self._topics[topic]
            except KeyError:
                raise UnknownTopic(f"unknown topic {topic!r}") from None

    def _state(self, sub: Subscription) -> tuple[_TopicLog, _GroupState]:
        log = self._log(sub.topic)
        try:
            return log, log.groups[sub.group_id]
        except KeyError:
            raise UnknownSubscription(
                f"group {sub.group_id!r} is not subscribed to {sub.topic!r}"
            ) from None

    def _cond_for(self, sub: Subscription) -> threading.Condition:
        self._log(sub.topic)
        return self._conds[sub.topic]

    # -- persistence ----------------------------------------------------------

    def _topic_dir(self, name: str) -> Path:
        return self._data_dir / "topics" / name

    def _open_log_file(self, name: str) -> None:
        d = self._topic_dir(name)
        d.mkdir(parents=True, exist_ok=True)
        self._files[name] = (d / "log.jsonl").open("a", encoding="utf-8")
        self._pos_files[name] = (d / "positions.jsonl").open("a", encoding="utf-8")

    def _persist_position(self, name: str, group_id: str, committed: int) -> None:
        f = self._pos_files.get(name)
        if f is None:
            return
        f.write(json.dumps({"g": group_id, "c": committed}, separators=(",", ":")) + "\n")
        f.flush()

    def _persist(self, name: str, msg: Message) -> None:
        f = self._files.get(name)
        if f is None:
            return
        rec = {
            "o": msg.offset,
            "k": msg.key,
            "h": msg.headers,
            "p": base64.b64encode(msg.payload).decode("ascii"),
        }
        f.write(json.dumps(rec, separators=(",", ":")) + "\n")

    def _flush(self, name: str) -> None:
        f = self._files.get(name)
        if f is not None:
            f.flush()

    def _load(self) -> None:
        root = self._data_dir / "topics"
        if not root.is_dir():
            return
        for d in sorted(root.iterdir()):
            path = d / "log.jsonl"
            if not path.is_file():
                continue
            name = d.name
            log = _TopicLog(name)
            with path.open(encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if not line:
                        continue
                    rec = json.loads(line)
                    msg = Message(
                        payload=base64.b64decode(rec["p"]),
                        key=rec["k"],
                        headers=dict(rec["h"]),
                        topic=name,
                        offset=rec["o"],
                    )
                    log.messages[msg.offset] = msg
                    log.end_offset = max(log.end_offset, msg.offset + 1)
            pos_path = d / "positions.jsonl"
            if pos_path.is_file():
                with pos_path.open(encoding="utf-8") as f:
                    for line in f:
                        line = line.strip()
                        if not line:
                            continue
                        rec = json.loads(line)
                        log.stored_positions[rec["g"]] = max(
                            log.stored_positions.get(rec["g"], 0), rec["c"]
                        )
            self._topics[name] = log
            self._conds[name] = threading.Condition(self._lock)
            self._open_log_file(name)

    def close(self) -> None:
        with self._lock:
            for f in self._files.values():
                f.close()
            for f in self._pos_files.values():
                f.close()
            self._files.clear()
            self._pos_files.clear()
