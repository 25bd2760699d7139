"""Wires stores, broker, runtime and the layer functions into one runnable
system, and owns its lifecycle: start up (stores, broker, runtime,
triggers, HTTP), drain on shutdown, and persist run artifacts (timings,
predictions) for the report command.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .broker import Broker
from .clock import SimulatedClock, SystemClock
from .config import AppConfig
from .errors import ConfigError, NoData
from .evaluation import RocCurve, roc_points
from .features import Featurizer
from .forest import RandomForestAlertClassifier, deserialize_forest, serialize_forest
from .httpapi import IngressServer
from .metrics import TimingRecorder, fraction_within, render_report
from .pipeline import (
    AlertClassifier,
    FileSink,
    HistoricalEnricher,
    HttpSink,
    ModelSlot,
    PagerDutyConverter,
    PersistAndRoute,
    PipelineTopics,
    PredictionLog,
    Retrainer,
    SlackNotifier,
    StagingSampler,
    TrainingSetBuilder,
    build_training_set,
    label_incidents,
)
from .runtime import (
    EnvDocuments,
    EnvObjects,
    FunctionRuntime,
    FunctionSpec,
    HttpTrigger,
    TimerTrigger,
    TopicTrigger,
)
from .store import DocumentStore, ObjectStore
from .workload import Workload

logger = logging.getLogger(__name__)

INGEST_ROUTE = "/api/v1/ingest/pagerduty"
MODEL_KEY = "model/current"


def topics_from_config(config: AppConfig) -> PipelineTopics:
    p = config.pipeline
    return PipelineTopics(
        raw=p.topic_raw,
        converted=p.topic_converted,
        new_incidents=p.topic_new_incidents,
        features=p.topic_features,
        retrain=p.topic_retrain,
    )


def model_params_from_config(config: AppConfig) -> dict:
    m = config.model
    return {
        "n_trees": m.n_trees,
        "max_depth": m.max_depth,
        "min_samples_split": m.min_samples_split,
        "n_candidate_features": m.n_candidate_features or None,
        "seed": m.seed,
    }


class System:
    """A fully wired pipeline instance.

    The pacing clock (timers, simulated arrival time) is separate from the
    metrics clock: latency is always measured on the real monotonic clock
    unless a metrics_now override is supplied.
    """

    def __init__(
        self,
        config: AppConfig,
        pacing_clock=None,
        metrics_now=None,
        sink=None,
        http_port: int | None = None,
    ):
        self.config = config
        data_dir = Path(config.pipeline.data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        self.data_dir = data_dir

        if pacing_clock is not None:
            self.clock = pacing_clock
        elif config.runtime.simulated_clock:
            self.clock = SimulatedClock()
        else:
            self.clock = SystemClock()

        self.broker = Broker(
            data_dir=data_dir / "broker", max_retries=config.pipeline.max_retries
        )
        self.documents = DocumentStore(data_dir=data_dir / "store")
        self.objects = ObjectStore(data_dir=data_dir / "store")
        self.runtime = FunctionRuntime(
            self.broker,
            self.documents,
            self.objects,
            clock=self.clock,
            metrics_now=metrics_now if metrics_now is not None else time.monotonic,
            max_concurrency=config.runtime.max_concurrency,
            claim_threshold=config.pipeline.claim_threshold,
        )
        self.topics = topics_from_config(config)
        self.prediction_log = PredictionLog()
        self.slots: dict[str, ModelSlot] = {}
        self.retrain_timer_ids: dict[str, str] = {}

        if sink is None:
            scheme, target = config.sink_target
            sink = FileSink(target) if scheme == "file" else HttpSink(target)
        self.sink = sink

        self._register_environment("production", sink, with_sampler=True)
        if config.pipeline.staging_enabled:
            staging_sink = FileSink(data_dir / "sink-staging.jsonl")
            self._register_environment("staging", staging_sink, with_sampler=False)

        self.http = IngressServer(
            self.runtime,
            host=config.http.host,
            port=http_port if http_port is not None else config.http.port,
        )
        self._started = False

    def _register_environment(self, env: str, sink, with_sampler: bool) -> None:
        cfg = self.config
        mode = cfg.pipeline.delivery_mode
        featurizer = Featurizer(
            dimension=cfg.pipeline.feature_dimension, hash_seed=cfg.pipeline.hash_seed
        )
        slot = ModelSlot()
        self.slots[env] = slot
        notifier = SlackNotifier(sink)
        log = self.prediction_log if env == "production" else None

        rt = self.runtime
        if with_sampler:
            clone_env = "staging" if cfg.pipeline.staging_enabled else None
            sampler = rt.register_function(
                FunctionSpec(
                    name="sampler",
                    layer=0,
                    handler=StagingSampler(
                        self.topics, divisor=cfg.pipeline.sampling_divisor, clone_env=clone_env
                    ),
                ),
                env=env,
            )
            rt.attach_trigger(sampler, HttpTrigger(route=INGEST_ROUTE))

        converter = rt.register_function(
            FunctionSpec(name="converter", layer=1, handler=PagerDutyConverter(self.topics)),
            env=env,
        )
        rt.attach_trigger(converter, TopicTrigger(self.topics.raw, mode=mode))

        router = rt.register_function(
            FunctionSpec(name="router", layer=3, handler=PersistAndRoute(self.topics)), env=env
        )
        rt.attach_trigger(router, TopicTrigger(self.topics.converted, mode=mode))

        enricher = rt.register_function(
            FunctionSpec(
                name="enricher", layer=5, handler=HistoricalEnricher(self.topics, featurizer)
            ),
            env=env,
        )
        rt.attach_trigger(enricher, TopicTrigger(self.topics.new_incidents, mode=mode))

        classifier = rt.register_function(
            FunctionSpec(
                name="classifier",
                layer=7,
                handler=AlertClassifier(slot, notifier, prediction_log=log),
            ),
            env=env,
        )
        rt.attach_trigger(classifier, TopicTrigger(self.topics.features, mode=mode))

        builder = rt.register_function(
            FunctionSpec(
                name="training-set-builder",
                layer=5,
                handler=TrainingSetBuilder(self.topics, featurizer),
            ),
            env=env,
        )
        self.retrain_timer_ids[env] = rt.attach_trigger(
            builder, TimerTrigger(period=cfg.pipeline.retrain_period_seconds)
        )

        retrainer = rt.register_function(
            FunctionSpec(
                name="retrainer",
                layer=7,
                handler=Retrainer(
                    slot, model_params=model_params_from_config(cfg), model_key=MODEL_KEY
                ),
            ),
            env=env,
        )
        rt.attach_trigger(retrainer, TopicTrigger(self.topics.retrain, mode=mode))

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        for env, slot in self.slots.items():
            key = f"{env}/{MODEL_KEY}"
            if self.objects.obj_exists(key):
                forest = deserialize_forest(self.objects.obj_get(key))
                slot.adopt(forest)
                logger.info("%s: restored model v%d from the object store", env, forest.version_)
        self.runtime.start()
        try:
            self.http.start()
        except Exception:
            self.runtime.stop()
            raise
        self._started = True
        logger.info("system up; ingress at %s%s", self.http.url, INGEST_ROUTE)

    def shutdown(self, drain: bool = True, timeout: float = 60.0) -> bool:
        """Stop ingress, drain in-flight messages, stop the runtime, persist
        run artifacts. Returns True when the drain completed in time."""
        drained = True
        if self._started:
            self.http.stop()
            if drain:
                drained = self.runtime.drain(timeout=timeout)
                if not drained:
                    logger.warning("drain timed out after %.1fs", timeout)
            self.runtime.stop()
            self._started = False
        metrics_dir = self.data_dir / "metrics"
        metrics_dir.mkdir(parents=True, exist_ok=True)
        self.runtime.metrics_for("production").dump(metrics_dir / "timings.jsonl")
        self.prediction_log.dump(metrics_dir / "predictions.jsonl")
        self.broker.close()
        self.documents.close()
        return drained

    # -- convenience -------------------------------------------------------------

    def ingest(self, body: bytes) -> str:
        """In-process webhook ingestion; returns the receipt id."""
        status, payload = self.runtime.http_ingress(INGEST_ROUTE, body, {})
        if status != 202:
            raise RuntimeError(f"ingest rejected: HTTP {status} {payload}")
        return payload["receipt_id"]

    def run_workload(self, workload: Workload) -> list[str]:
        """Feed a generated workload through ingestion, advancing a simulated
        pacing clock to each event's arrival time."""
        receipts = []
        simulated = isinstance(self.clock, SimulatedClock)
        for event in workload.events:
            if simulated:
                self.clock.advance_to(event.time)
            receipts.append(self.ingest(event.payload))
        return receipts

    def drain(self, timeout: float = 60.0) -> bool:
        return self.runtime.drain(timeout=timeout)

    def production_metrics(self) -> TimingRecorder:
        return self.runtime.metrics_for("production")

    def conservation(self) -> dict:
        """End-to-end message accounting for the production environment."""
        recorder = self.production_metrics()
        accepted = recorder.ingress_count()
        reported = len(recorder.records("reported"))
        saved = len(recorder.records("saved"))
        dead = 0
        for name in self.broker.topic_names():
            if name.startswith("production.") and name.endswith(".dlq"):
                dead += self.broker.end_offset(name)
        return {
            "accepted": accepted,
            "reported": reported,
            "saved": saved,
            "dead_lettered": dead,
            "conserved": accepted == reported + saved + dead,
        }


# -- offline operations (CLI train / report) ---------------------------------------


def parse_window_spec(spec: str) -> float | None:
    """'all' or a trailing span like 90m / 24h / 7d / 3600s, in seconds."""
    spec = spec.strip().lower()
    if spec == "all":
        return None
    units = {"s": 1.0, "m": 60.0, "h": 3600.0, "d": 86400.0}
    if spec and spec[-1] in units:
        try:
            return float(spec[:-1]) * units[spec[-1]]
        except ValueError:
            pass
    raise ConfigError(f"cannot parse window spec {spec!r}; use e.g. 24h, 7d, or all")


def offline_train(config: AppConfig, window_spec: str = "all") -> tuple[int, int, int]:
    """Train a model from the persisted store, outside a running system.

    Returns (version, n_examples, n_features).
    """
    data_dir = Path(config.pipeline.data_dir)
    documents = DocumentStore(data_dir=data_dir / "store")
    objects = ObjectStore(data_dir=data_dir / "store")
    docs = EnvDocuments(documents, "production")
    objs = EnvObjects(objects, "production")
    featurizer = Featurizer(
        dimension=config.pipeline.feature_dimension, hash_seed=config.pipeline.hash_seed
    )
    trailing = parse_window_spec(window_spec)
    dataset = build_training_set(docs, featurizer, trailing_seconds=trailing)

    version = 1
    if objs.obj_exists(MODEL_KEY):
        version = deserialize_forest(objs.obj_get(MODEL_KEY)).version_ + 1
    forest = RandomForestAlertClassifier(**model_params_from_config(config))
    forest.fit(dataset.X, dataset.y)
    forest.version_ = version
    forest.trained_at_ = time.time()
    objs.obj_put(MODEL_KEY, serialize_forest(forest))
    documents.close()
    return version, dataset.n, dataset.d


@dataclass
class ReportBundle:
    table: str
    histogram_csv: str
    fractions: dict[str, float]
    roc: RocCurve | None
    n_scored: int


def build_report(
    config: AppConfig,
    kind: str | None = None,
    bin_width: float = 1.0,
    threshold_seconds: float = 15.0,
) -> ReportBundle:
    """Assemble the latency table, histogram CSV and (when labels exist)
    the ROC summary from the last run's persisted artifacts."""
    data_dir = Path(config.pipeline.data_dir)
    timings_path = data_dir / "metrics" / "timings.jsonl"
    if not timings_path.is_file():
        raise NoData(f"no timing records under {data_dir}; run the system first")
    records = TimingRecorder.load_records(timings_path)
    if not records:
        raise NoData("timing log is empty; run the system first")
    series = {}
    for r in records:
        series.setdefault(r.kind, []).append(r.duration)
    if kind is not None:
        if kind not in series:
            raise NoData(f"no {kind!r} records in the last run")
        series = {kind: series[kind]}
    table, histogram = render_report(series, bin_width=bin_width)
    fractions = {k: fraction_within(v, threshold_seconds) for k, v in series.items()}

    roc = None
    n_scored = 0
    predictions_path = data_dir / "metrics" / "predictions.jsonl"
    if predictions_path.is_file():
        predictions = PredictionLog.load(predictions_path)
        labels = _labels_from_store(data_dir)
        scored = [
            (p["probability"], labels[p["incident_id"]])
            for p in predictions
            if p["incident_id"] in labels
        ]
        n_scored = len(scored)
        if scored and len({label for _, label in scored}) == 2:
            roc = roc_points([s for s, _ in scored], [l for _, l in scored])
    return ReportBundle(
        table=table, histogram_csv=histogram, fractions=fractions, roc=roc, n_scored=n_scored
    )


def _labels_from_store(data_dir: Path) -> dict[str, int]:
    documents = DocumentStore(data_dir=data_dir / "store")
    try:
        bodies = []
        token = None
        while True:
            res = documents.doc_query(
                "production/incident/", (float("-inf"), float("inf")), 1000, continuation=token
            )
            bodies.extend(d.body for d in res.documents)
            if res.continuation is None:
                break
            token = res.continuation
        return {body["incident_id"]: label for body, label in label_incidents(bodies)}
    finally:
        documents.close()
