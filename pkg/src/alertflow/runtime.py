"""Stateless function runtime: registration, triggers, dispatch.

Functions live in the odd layers (0, 1, 3, 5, 7) of the pipeline and are
invoked by triggers:

* ``TopicTrigger`` polls a consumer-group subscription and dispatches
  batches to handler instances, in one of two modes. In ``ack`` mode the
  batch offsets are acknowledged only after the handler returns; a handler
  exception nacks every offset for redelivery (dead-lettered by the broker
  once retries are exhausted). In ``fire-and-forget`` mode the offsets are
  committed before the handler runs, so a handler failure silently loses
  the batch -- kept available to reproduce that failure mode, never the
  default.
* ``TimerTrigger`` fires periodically on the injected clock. The period is
  mutable at runtime (``update_timer``) and ticks are never queued while
  the process is paused or the trigger disabled.
* ``HttpTrigger`` binds a POST route. Accepted bodies are enqueued onto an
  internal ingress topic (durable before the 202 goes out) and flow to the
  function through an ordinary ack-mode topic trigger.

Every function is registered inside an environment (production, staging,
test, development). A namespace prefix keeps topics and store keys of one
environment invisible to another; the only sanctioned crossing is a
layer-0 function cloning traffic downward into staging/test environments.

Handlers hold no state between invocations: everything they touch flows
through the context (broker publish, stores, metrics, claim check).
"""

from __future__ import annotations

import json
import logging
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

from .broker import HEADER_INGRESS_TS, HEADER_RECEIPT_ID, Broker, Message, Subscription
from .clock import SystemClock
from .errors import (
    DuplicateName,
    EnvironmentViolation,
    InvalidLayer,
    InvalidPeriod,
    NotATimer,
    RouteConflict,
    UnknownFunction,
)
from .metrics import TimingRecorder
from .store import ClaimCheck, DocumentStore, ObjectStore

logger = logging.getLogger(__name__)

VALID_LAYERS = (0, 1, 3, 5, 7)
ENVIRONMENTS = ("production", "staging", "test", "development")

MODE_ACK = "ack"
MODE_FIRE_AND_FORGET = "fire-and-forget"

Handler = Callable[["Context", list[Message]], None]


@dataclass(frozen=True)
class FunctionSpec:
    """A stateless handler plus its pipeline layer."""

    name: str
    layer: int
    handler: Handler


@dataclass(frozen=True)
class TopicTrigger:
    topic: str
    mode: str = MODE_ACK
    batch_size: int = 1


@dataclass(frozen=True)
class TimerTrigger:
    period: float
    enabled: bool = True


@dataclass(frozen=True)
class HttpTrigger:
    route: str
    content_type: str = "application/json"


class EnvDocuments:
    """Document-store view confined to one environment's key prefix."""

    def __init__(self, store: DocumentStore, env: str):
        self._store = store
        self._prefix = f"{env}/"

    def doc_put(self, key, body, created_at=None):
        return self._store.doc_put(self._prefix + key, body, created_at=created_at)

    def doc_get(self, key):
        return self._store.doc_get(self._prefix + key)

    def doc_get_document(self, key):
        return self._store.doc_get_document(self._prefix + key)

    def doc_exists(self, key):
        return self._store.doc_exists(self._prefix + key)

    def doc_query(self, key_prefix, time_window, limit, continuation=None):
        return self._store.doc_query(
            self._prefix + key_prefix, time_window, limit, continuation=continuation
        )


class EnvObjects:
    """Object-store view confined to one environment's key prefix."""

    def __init__(self, store: ObjectStore, env: str):
        self._store = store
        self._prefix = f"{env}/"

    def obj_put(self, key, data):
        return self._store.obj_put(self._prefix + key, data)

    def obj_get(self, key):
        return self._store.obj_get(self._prefix + key)

    def obj_digest(self, key):
        return self._store.obj_digest(self._prefix + key)

    def obj_exists(self, key):
        return self._store.obj_exists(self._prefix + key)

    def obj_delete(self, key):
        return self._store.obj_delete(self._prefix + key)


class Context:
    """Per-invocation handle to everything a stateless handler may touch."""

    def __init__(self, runtime: "FunctionRuntime", env: str, function: "_Function"):
        self._runtime = runtime
        self._function = function
        self.env = env
        self.docs = runtime.env_docs(env)
        self.objects = runtime.env_objects(env)
        self.claim = ClaimCheck(self.objects, threshold=runtime.claim_threshold)
        self.metrics = runtime.metrics_for(env)
        self.clock = runtime.clock

    def physical_topic(self, topic: str) -> str:
        return self._runtime.physical_topic(self.env, topic)

    def publish(self, topic: str, message: Message) -> int:
        return self._runtime.broker.publish(self.physical_topic(topic), message)

    def publish_batch(self, topic: str, batch: list[Message]) -> list[int]:
        return self._runtime.broker.publish_batch(self.physical_topic(topic), batch)

    def publish_to_env(self, env: str, topic: str, message: Message) -> int:
        """Cross-environment publish; only layer-0 functions may clone
        traffic, and never into production from elsewhere."""
        if self._function.spec.layer != 0:
            raise EnvironmentViolation(
                f"function {self._function.spec.name!r} (layer "
                f"{self._function.spec.layer}) may not publish across environments"
            )
        if env == "production" and self.env != "production":
            raise EnvironmentViolation("cannot clone traffic into production")
        physical = self._runtime.physical_topic(env, topic)
        rid = message.headers.get(HEADER_RECEIPT_ID)
        if rid:
            self._runtime.metrics_for(env).mark_ingress(
                rid, float(message.headers.get(HEADER_INGRESS_TS, self.clock.now()))
            )
        return self._runtime.broker.publish(physical, message)


@dataclass
class InvocationStats:
    invocations: int = 0
    failures: int = 0
    lost: int = 0  # fire-and-forget batches dropped on handler failure


class _Function:
    def __init__(self, spec: FunctionSpec, env: str, max_concurrency: int):
        self.spec = spec
        self.env = env
        self.max_concurrency = max_concurrency
        self.executor = self._new_executor()
        self.stats = InvocationStats()
        self.stats_lock = threading.Lock()

    def _new_executor(self) -> ThreadPoolExecutor:
        return ThreadPoolExecutor(
            max_workers=self.max_concurrency,
            thread_name_prefix=f"{self.env}.{self.spec.name}",
        )

    def recycle_executor(self) -> None:
        self.executor.shutdown(wait=True)
        self.executor = self._new_executor()


class FunctionHandle:
    def __init__(self, env: str, name: str):
        self.env = env
        self.name = name


class _TriggerBase:
    def __init__(self, handle_id: str, function: _Function):
        self.id = handle_id
        self.function = function
        self.stop_event = threading.Event()
        self.thread: threading.Thread | None = None
        self.active = 0  # handler tasks in flight
        self.active_lock = threading.Lock()


class _TopicTriggerState(_TriggerBase):
    def __init__(self, handle_id, function, trigger: TopicTrigger, sub: Subscription):
        super().__init__(handle_id, function)
        self.trigger = trigger
        self.sub = sub


class _TimerTriggerState(_TriggerBase):
    def __init__(self, handle_id, function, trigger: TimerTrigger):
        super().__init__(handle_id, function)
        self.period = trigger.period
        self.enabled = trigger.enabled
        self.wake = threading.Event()
        self.lock = threading.Lock()


@dataclass(frozen=True)
class RouteSpec:
    route: str
    content_type: str
    env: str
    function: str
    ingress_topic: str  # physical


class FunctionRuntime:
    def __init__(
        self,
        broker: Broker,
        documents: DocumentStore,
        objects: ObjectStore,
        clock=None,
        metrics_now: Callable[[], float] | None = None,
        max_concurrency: int = 64,
        claim_threshold: int | None = None,
    ):
        from .store import DEFAULT_CLAIM_THRESHOLD

        self.broker = broker
        self.documents = documents
        self.objects = objects
        self.clock = clock if clock is not None else SystemClock()
        self.max_concurrency = max_concurrency
        self.claim_threshold = (
            claim_threshold if claim_threshold is not None else DEFAULT_CLAIM_THRESHOLD
        )
        self._metrics_now = metrics_now
        self._functions: dict[tuple[str, str], _Function] = {}
        self._triggers: dict[str, _TriggerBase] = {}
        self._routes: dict[str, RouteSpec] = {}
        self._recorders: dict[str, TimingRecorder] = {}
        self._lock = threading.RLock()
        self._started = False

    # -- environment plumbing -------------------------------------------------

    def physical_topic(self, env: str, topic: str) -> str:
        if env not in ENVIRONMENTS:
            raise EnvironmentViolation(f"unknown environment {env!r}")
        for other in ENVIRONMENTS:
            if topic.startswith(other + "."):
                raise EnvironmentViolation(
                    f"topic {topic!r} names environment {other!r} explicitly; "
                    "use logical topic names"
                )
        return f"{env}.{topic}"

    def env_docs(self, env: str) -> EnvDocuments:
        return EnvDocuments(self.documents, env)

    def env_objects(self, env: str) -> EnvObjects:
        return EnvObjects(self.objects, env)

    def metrics_for(self, env: str) -> TimingRecorder:
        with self._lock:
            if env not in self._recorders:
                now = self._metrics_now if self._metrics_now is not None else self.clock.now
                self._recorders[env] = TimingRecorder(now=now)
            return self._recorders[env]

    def ensure_topic(self, env: str, topic: str) -> str:
        physical = self.physical_topic(env, topic)
        self.broker.ensure_topic(physical)
        return physical

    # -- registration -----------------------------------------------------------

    def register_function(self, spec: FunctionSpec, env: str = "production") -> FunctionHandle:
        if env not in ENVIRONMENTS:
            raise EnvironmentViolation(f"unknown environment {env!r}")
        if spec.layer not in VALID_LAYERS:
            raise InvalidLayer(
                f"layer {spec.layer} is not a function layer; even layers are topics"
            )
        with self._lock:
            if (env, spec.name) in self._functions:
                raise DuplicateName(f"function {spec.name!r} already registered in {env}")
            self._functions[(env, spec.name)] = _Function(spec, env, self.max_concurrency)
        return FunctionHandle(env, spec.name)

    def _function(self, handle: FunctionHandle) -> _Function:
        fn = self._functions.get((handle.env, handle.name))
        if fn is None:
            raise UnknownFunction(f"no function {handle.name!r} in {handle.env}")
        return fn

    def attach_trigger(
        self, handle: FunctionHandle, trigger: TopicTrigger | TimerTrigger | HttpTrigger
    ) -> str:
        """Activate a trigger for a registered function; returns a trigger id."""
        fn = self._function(handle)
        with self._lock:
            if isinstance(trigger, TopicTrigger):
                if trigger.batch_size < 1:
                    raise ValueError("batch size must be >= 1")
                if trigger.mode not in (MODE_ACK, MODE_FIRE_AND_FORGET):
                    raise ValueError(f"unknown delivery mode {trigger.mode!r}")
                physical = self.ensure_topic(handle.env, trigger.topic)
                group = f"{handle.env}.{handle.name}.{trigger.topic}"
                sub = self.broker.subscribe(physical, group)
                tid = f"topic:{group}"
                state = _TopicTriggerState(tid, fn, trigger, sub)
                self._triggers[tid] = state
                if self._started:
                    self._start_topic_trigger(state)
                return tid
            if isinstance(trigger, TimerTrigger):
                if trigger.period <= 0:
                    raise InvalidPeriod(f"timer period must be positive, got {trigger.period}")
                tid = f"timer:{handle.env}.{handle.name}.{uuid.uuid4().hex[:8]}"
                state = _TimerTriggerState(tid, fn, trigger)
                self._triggers[tid] = state
                if self._started:
                    self._start_timer_trigger(state)
                return tid
            if isinstance(trigger, HttpTrigger):
                if trigger.route in self._routes:
                    raise RouteConflict(f"route {trigger.route!r} already bound")
                ingress_topic = f"ingress.{handle.name}"
                physical = self.ensure_topic(handle.env, ingress_topic)
                self._routes[trigger.route] = RouteSpec(
                    route=trigger.route,
                    content_type=trigger.content_type,
                    env=handle.env,
                    function=handle.name,
                    ingress_topic=physical,
                )
                return self.attach_trigger(
                    handle, TopicTrigger(topic=ingress_topic, mode=MODE_ACK, batch_size=1)
                )
            raise TypeError(f"unknown trigger type {type(trigger).__name__}")

    def update_timer(self, trigger_id: str, new_period: float) -> None:
        state = self._triggers.get(trigger_id)
        if state is None or not isinstance(state, _TimerTriggerState):
            raise NotATimer(f"trigger {trigger_id!r} is not a timer")
        if new_period <= 0:
            raise InvalidPeriod(f"timer period must be positive, got {new_period}")
        with state.lock:
            state.period = new_period
        state.wake.set()
        self.clock.kick()

    def set_timer_enabled(self, trigger_id: str, enabled: bool) -> None:
        state = self._triggers.get(trigger_id)
        if state is None or not isinstance(state, _TimerTriggerState):
            raise NotATimer(f"trigger {trigger_id!r} is not a timer")
        with state.lock:
            state.enabled = enabled

    # -- HTTP ingress -----------------------------------------------------------

    def routes(self) -> dict[str, RouteSpec]:
        with self._lock:
            return dict(self._routes)

    def http_ingress(
        self, route: str, body: bytes, headers: dict[str, str] | None = None
    ) -> tuple[int, dict[str, Any]]:
        """Process one inbound POST; returns (status, response body).

        Durability ordering: the body is appended to the function's ingress
        topic before the 202 response is produced.
        """
        spec = self._routes.get(route)
        if spec is None:
            return 404, {"error": f"no such route {route!r}"}
        if len(body) > self.broker.max_message_bytes:
            return 413, {"error": "body exceeds the 1 MiB message cap"}
        if spec.content_type == "application/json":
            try:
                json.loads(body.decode("utf-8"))
            except (UnicodeDecodeError, ValueError):
                return 400, {"error": "body is not valid JSON"}
        receipt_id = uuid.uuid4().hex
        recorder = self.metrics_for(spec.env)
        ingress_ts = recorder.now()
        recorder.mark_ingress(receipt_id, ingress_ts)
        msg = Message(
            payload=body,
            headers={
                HEADER_RECEIPT_ID: receipt_id,
                HEADER_INGRESS_TS: repr(ingress_ts),
            },
        )
        self.broker.publish(spec.ingress_topic, msg)
        return 202, {"receipt_id": receipt_id}

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        with self._lock:
            if self._started:
                return
            self._started = True
            for state in self._triggers.values():
                if isinstance(state, _TopicTriggerState):
                    self._start_topic_trigger(state)
                elif isinstance(state, _TimerTriggerState):
                    self._start_timer_trigger(state)

    def stop(self) -> None:
        with self._lock:
            if not self._started:
                return
            self._started = False
            states = list(self._triggers.values())
        for state in states:
            state.stop_event.set()
            if isinstance(state, _TimerTriggerState):
                state.wake.set()
        self.clock.kick()
        for state in states:
            if state.thread is not None:
                state.thread.join(timeout=10)
        for fn in self._functions.values():
            fn.recycle_executor()  # waits for running handlers; start() works again

    def drain(self, timeout: float = 30.0) -> bool:
        """Wait until no trigger has backlog or a handler still running.
        Returns False when the timeout elapsed first."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            busy = False
            for state in list(self._triggers.values()):
                with state.active_lock:
                    active = state.active
                if active:
                    busy = True
                    break
                if isinstance(state, _TopicTriggerState) and self.broker.pending(state.sub) > 0:
                    busy = True
                    break
            if not busy:
                return True
            time.sleep(0.01)
        return False

    def invocation_stats(self, env: str, name: str) -> InvocationStats:
        fn = self._functions.get((env, name))
        if fn is None:
            raise UnknownFunction(f"no function {name!r} in {env}")
        with fn.stats_lock:
            return InvocationStats(
                invocations=fn.stats.invocations,
                failures=fn.stats.failures,
                lost=fn.stats.lost,
            )

    # -- dispatch ------------------------------------------------------------------

    def _start_topic_trigger(self, state: _TopicTriggerState) -> None:
        state.stop_event.clear()
        state.thread = threading.Thread(
            target=self._topic_loop, args=(state,), name=f"poll-{state.id}", daemon=True
        )
        state.thread.start()

    def _start_timer_trigger(self, state: _TimerTriggerState) -> None:
        state.stop_event.clear()
        state.wake.clear()
        state.thread = threading.Thread(
            target=self._timer_loop, args=(state,), name=f"tick-{state.id}", daemon=True
        )
        state.thread.start()

    def _topic_loop(self, state: _TopicTriggerState) -> None:
        fn = state.function
        sub = state.sub
        trigger = state.trigger
        while not state.stop_event.is_set():
            with state.active_lock:
                saturated = state.active >= self.max_concurrency
            if saturated:
                state.stop_event.wait(0.002)
                continue
            batch = self.broker.poll(sub, trigger.batch_size, timeout=0.1)
            if not batch:
                continue
            with state.active_lock:
                state.active += 1
            if trigger.mode == MODE_FIRE_AND_FORGET:
                # mark processed before the handler ever runs
                self.broker.commit(sub, batch[-1].offset)
                fn.executor.submit(self._run_fire_and_forget, state, batch)
            else:
                fn.executor.submit(self._run_ack, state, batch)

    def _run_ack(self, state: _TopicTriggerState, batch: list[Message]) -> None:
        fn = state.function
        try:
            ctx = Context(self, fn.env, fn)
            try:
                fn.spec.handler(ctx, batch)
            except Exception:
                logger.exception(
                    "handler %s failed; nacking %d offset(s)", fn.spec.name, len(batch)
                )
                with fn.stats_lock:
                    fn.stats.invocations += 1
                    fn.stats.failures += 1
                for m in batch:
                    self.broker.nack(state.sub, m.offset)
                return
            with fn.stats_lock:
                fn.stats.invocations += 1
            self.broker.ack(state.sub, [m.offset for m in batch])
        finally:
            with state.active_lock:
                state.active -= 1

    def _run_fire_and_forget(self, state: _TopicTriggerState, batch: list[Message]) -> None:
        fn = state.function
        try:
            ctx = Context(self, fn.env, fn)
            try:
                fn.spec.handler(ctx, batch)
                with fn.stats_lock:
                    fn.stats.invocations += 1
            except Exception:
                logger.exception(
                    "handler %s failed in fire-and-forget mode; %d message(s) lost",
                    fn.spec.name,
                    len(batch),
                )
                with fn.stats_lock:
                    fn.stats.invocations += 1
                    fn.stats.failures += 1
                    fn.stats.lost += len(batch)
        finally:
            with state.active_lock:
                state.active -= 1

    def _timer_loop(self, state: _TimerTriggerState) -> None:
        fn = state.function
        with state.lock:
            period = state.period
        next_tick = self.clock.now() + period
        while not state.stop_event.is_set():
            reached = self.clock.wait_until(next_tick, interrupt=state.wake)
            if state.stop_event.is_set():
                return
            if not reached:
                # period changed: restart the countdown from now
                state.wake.clear()
                with state.lock:
                    period = state.period
                next_tick = self.clock.now() + period
                continue
            with state.lock:
                enabled = state.enabled
                period = state.period
            if enabled:
                tick = Message(
                    payload=b"", headers={"timer-ts": repr(self.clock.now())}
                )
                with state.active_lock:
                    state.active += 1
                fn.executor.submit(self._run_tick, state, tick)
            # no catch-up: schedule strictly after the current instant
            next_tick = self.clock.now() + period

    def _run_tick(self, state: _TimerTriggerState, tick: Message) -> None:
        fn = state.function
        try:
            ctx = Context(self, fn.env, fn)
            try:
                fn.spec.handler(ctx, [tick])
                with fn.stats_lock:
                    fn.stats.invocations += 1
            except Exception:
                logger.exception("timer handler %s failed", fn.spec.name)
                with fn.stats_lock:
                    fn.stats.invocations += 1
                    fn.stats.failures += 1
        finally:
            with state.active_lock:
                state.active -= 1
