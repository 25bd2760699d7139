"""The concrete layer functions: sample, convert, route, enrich, classify,
retrain, notify.

Layer 0 clones every Nth production message into staging. Layer 1 converts
PagerDuty webhook JSON into the unified incident record. Layer 3 persists
every event and forwards only first-seen triggered incidents. Layer 5
featurizes against history (and, on a timer, builds training sets). Layer 7
serves the forest and posts predictions to a Slack-style sink; a sibling
function retrains from dataset tickets and swaps the serving model.

Redelivery safety: effects are keyed by receipt id (incident documents,
forward markers, sink markers), so ack-mode redelivery converges to exactly
one observable effect per receipt.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from .broker import HEADER_INGRESS_TS, HEADER_RECEIPT_ID, MAX_MESSAGE_BYTES, Message
from .errors import (
    ConversionError,
    DatasetCorrupt,
    DigestMismatch,
    DimensionMismatch,
    EmptyWindow,
    InvalidN,
    SinkUnreachable,
)
from .events import FeatureVector, IncidentEvent, Prediction, RouteDecision, parse_timestamp
from .features import Featurizer, incident_doc_key
from .forest import (
    Dataset,
    RandomForestAlertClassifier,
    deserialize_dataset,
    serialize_dataset,
    serialize_forest,
)
from .store import ClaimCheck, ClaimTicket

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineTopics:
    raw: str = "L1.raw"
    converted: str = "L2.converted"
    new_incidents: str = "L4.new-incidents"
    features: str = "L6.features"
    retrain: str = "L6.retrain"


def carry_headers(msg: Message) -> dict[str, str]:
    """Receipt id and ingress timestamp ride along every hop."""
    return {
        k: v for k, v in msg.headers.items() if k in (HEADER_RECEIPT_ID, HEADER_INGRESS_TS)
    }


# -- layer 0: staging sampler ---------------------------------------------------


def sample_split(sequence_number: int, divisor: int) -> set[str]:
    """Destination environments for one message: production always,
    staging for every divisor-th message."""
    if divisor < 1:
        raise InvalidN(f"sampling divisor must be >= 1, got {divisor}")
    if sequence_number < 1:
        raise ValueError("sequence numbers start at 1")
    dests = {"production"}
    if sequence_number % divisor == 0:
        dests.add("staging")
    return dests


class StagingSampler:
    """Layer 0: forwards everything to this environment's layer 1 and clones
    a sample into the staging environment when one is wired up."""

    def __init__(self, topics: PipelineTopics, divisor: int = 100, clone_env: str | None = None):
        self.topics = topics
        self.divisor = divisor
        self.clone_env = clone_env

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            out = Message(payload=msg.payload, key=msg.key, headers=carry_headers(msg))
            ctx.publish(self.topics.raw, out)
            # offsets are dense, so the ingress offset is the sequence number
            dests = sample_split(msg.offset + 1, self.divisor)
            if self.clone_env and self.clone_env in dests:
                ctx.publish_to_env(self.clone_env, self.topics.raw, out)


# -- layer 1: PagerDuty converter --------------------------------------------------

_KIND_BY_EVENT = {
    "incident.trigger": "triggered",
    "incident.acknowledge": "acknowledged",
    "incident.resolve": "resolved",
}


def _as_float(value: Any, default: float = 0.0) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        return default


def convert_pagerduty(raw: bytes, claim: ClaimCheck, receipt_id: str) -> IncidentEvent:
    """Map a PagerDuty-style webhook body onto the unified incident record.

    Unknown event strings map to kind "other"; only a missing incident id
    or created-at is fatal.
    """
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise ConversionError(f"webhook body is not JSON: {e}") from e
    if not isinstance(body, dict):
        raise ConversionError("webhook body must be a JSON object")
    kind = _KIND_BY_EVENT.get(body.get("event", ""), "other")
    incident = body.get("incident") or {}
    incident_id = incident.get("id")
    if not incident_id:
        raise ConversionError("webhook is missing incident.id")
    created_raw = incident.get("created_at")
    if not created_raw:
        raise ConversionError("webhook is missing incident.created_at")
    try:
        created_at = parse_timestamp(created_raw)
    except ValueError as e:
        raise ConversionError(f"unparseable incident.created_at: {e}") from e
    service_id = str((incident.get("service") or {}).get("id") or "unknown")
    alerts = incident.get("alerts") or []
    details = (alerts[0].get("custom_details") if alerts else None) or {}
    return IncidentEvent(
        receipt_id=receipt_id,
        source="pagerduty",
        kind=kind,
        incident_id=str(incident_id),
        service_id=service_id,
        severity=str(incident.get("urgency", "")),
        metric_name=str(details.get("metric", "")),
        metric_value=_as_float(details.get("value")),
        threshold=_as_float(details.get("threshold")),
        created_at=created_at,
        raw_ref=claim.wrap(raw, key_hint=receipt_id),
    )


class PagerDutyConverter:
    """Layer 1: unify raw webhooks; conversion failures go to the dead
    letter topic for replay instead of vanishing."""

    def __init__(self, topics: PipelineTopics):
        self.topics = topics
        self.dlq = f"{topics.raw}.dlq"

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            receipt = msg.receipt_id() or uuid.uuid4().hex
            try:
                event = convert_pagerduty(msg.payload, ctx.claim, receipt)
            except ConversionError as e:
                logger.warning("conversion failed for receipt %s: %s", receipt, e)
                headers = dict(msg.headers)
                headers["dlq-reason"] = "conversion-error"
                ctx.publish(self.dlq, Message(payload=msg.payload, headers=headers))
                continue
            payload = event.encode()
            if len(payload) > MAX_MESSAGE_BYTES:
                # inline raw made the envelope outgrow the cap: check it in
                event = replace(event, raw_ref=ctx.claim.store(msg.payload, key_hint=receipt))
                payload = event.encode()
            ctx.publish(
                self.topics.converted,
                Message(payload=payload, key=event.incident_id, headers=carry_headers(msg)),
            )


# -- layer 3: persist and route ------------------------------------------------------

_FORWARD_MARKER = "route/forwarded/"


class PersistAndRoute:
    """Layer 3: persist every event; forward first-seen triggered incidents
    to layer 4; mark the "saved" egress for everything else."""

    def __init__(self, topics: PipelineTopics):
        self.topics = topics

    def route_event(self, ctx, event: IncidentEvent, headers: dict[str, str]) -> RouteDecision:
        ctx.docs.doc_put(incident_doc_key(event), event.to_json(), created_at=event.created_at)
        if event.kind != "triggered":
            # a receipt without an ingress mark was accepted before a restart
            # and cannot be measured
            if ctx.metrics.has_ingress(event.receipt_id) and not ctx.metrics.has_egress(
                event.receipt_id, "saved"
            ):
                ctx.metrics.mark_egress(event.receipt_id, kind="saved")
            return RouteDecision(forward=False)
        marker = f"{_FORWARD_MARKER}{event.receipt_id}"
        if ctx.docs.doc_exists(marker):
            return RouteDecision(forward=False)  # duplicate receipt: already forwarded
        ctx.publish(
            self.topics.new_incidents,
            Message(payload=event.encode(), key=event.incident_id, headers=headers),
        )
        ctx.docs.doc_put(marker, {"incident_id": event.incident_id})
        return RouteDecision(forward=True)

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            event = IncidentEvent.decode(msg.payload)
            self.route_event(ctx, event, carry_headers(msg))


# -- layer 5: enrichment ----------------------------------------------------------------


class HistoricalEnricher:
    """Layer 5: turn an incident into a fixed-dimension feature vector using
    the service's persisted history."""

    def __init__(self, topics: PipelineTopics, featurizer: Featurizer):
        self.topics = topics
        self.featurizer = featurizer

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            event = IncidentEvent.decode(msg.payload)
            values = self.featurizer.enrich_from_store(ctx.docs, event)
            fv = FeatureVector(incident_id=event.incident_id, values=values)
            ctx.publish(
                self.topics.features,
                Message(payload=fv.encode(), key=event.incident_id, headers=carry_headers(msg)),
            )


# -- layer 5: training-set builder (timer driven) ------------------------------------------


def label_incidents(bodies: list[dict]) -> list[tuple[dict, int]]:
    """Apply the labeling rule to event bodies: an incident is a true alert
    iff an acknowledgement arrived before its first resolution. Incidents
    without a resolution (or without their trigger in view) stay unlabeled
    and are dropped."""
    by_incident: dict[str, list[dict]] = {}
    for body in bodies:
        by_incident.setdefault(body["incident_id"], []).append(body)
    labeled = []
    for events in by_incident.values():
        events.sort(key=lambda b: b["created_at"])
        triggers = [b for b in events if b["kind"] == "triggered"]
        resolves = [b["created_at"] for b in events if b["kind"] == "resolved"]
        if not triggers or not resolves:
            continue
        first_resolve = min(resolves)
        acked = any(
            b["created_at"] < first_resolve for b in events if b["kind"] == "acknowledged"
        )
        labeled.append((triggers[0], 1 if acked else 0))
    return labeled


def build_training_set(
    docs,
    featurizer: Featurizer,
    window: tuple[float, float] = (float("-inf"), float("inf")),
    trailing_seconds: float | None = None,
    page_size: int = 1000,
) -> Dataset:
    """Featurize every labeled incident whose events fall in the window.

    With trailing_seconds, the window is anchored in event time: the span
    ending at the newest persisted event.
    """
    bodies: list[dict] = []
    token = None
    while True:
        res = docs.doc_query("incident/", window, limit=page_size, continuation=token)
        bodies.extend(d.body for d in res.documents)
        if res.continuation is None:
            break
        token = res.continuation
    if trailing_seconds is not None and bodies:
        cut = max(b["created_at"] for b in bodies) - trailing_seconds
        bodies = [b for b in bodies if b["created_at"] >= cut]
    labeled = label_incidents(bodies)
    if not labeled:
        raise EmptyWindow("no labeled incidents in the window")
    rows = []
    ids = []
    for body, _ in labeled:
        event = IncidentEvent.from_json(body)
        rows.append(featurizer.enrich_from_store(docs, event))
        ids.append(event.incident_id)
    X = np.vstack(rows)
    y = np.array([label for _, label in labeled], dtype=np.int8)
    return Dataset(X=X, y=y, incident_ids=ids)


class TrainingSetBuilder:
    """Timer-driven layer 5 function: build the dataset, park it in the
    object store, and pass a ticket to the retraining topic."""

    def __init__(
        self,
        topics: PipelineTopics,
        featurizer: Featurizer,
        window_seconds: float | None = None,
    ):
        self.topics = topics
        self.featurizer = featurizer
        self.window_seconds = window_seconds

    def __call__(self, ctx, messages: list[Message]) -> None:
        try:
            dataset = build_training_set(
                ctx.docs, self.featurizer, trailing_seconds=self.window_seconds
            )
        except EmptyWindow as e:
            logger.info("retraining round skipped: %s", e)
            return
        blob = serialize_dataset(dataset)
        key = f"datasets/{uuid.uuid4().hex}"
        digest = ctx.objects.obj_put(key, blob)
        ticket = ClaimTicket(object_key=key, digest=digest, size=len(blob))
        ctx.publish(
            self.topics.retrain,
            Message(payload=json.dumps(ticket.to_json()).encode("utf-8")),
        )
        logger.info(
            "training set of %d x %d staged under %s", dataset.n, dataset.d, key
        )


# -- layer 7: classify and retrain --------------------------------------------------------


class ModelSlot:
    """The one shared mutable: the serving forest. Readers always see a
    consistent (forest, version) pair; swaps are atomic."""

    def __init__(self):
        self._lock = threading.Lock()
        self._forest: RandomForestAlertClassifier | None = None
        self._version = 0

    def get(self) -> tuple[RandomForestAlertClassifier | None, int]:
        with self._lock:
            return self._forest, self._version

    def adopt(self, forest: RandomForestAlertClassifier) -> None:
        """Restore a previously persisted forest (e.g. after a restart)."""
        with self._lock:
            self._forest = forest
            self._version = forest.version_

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    def publish(self, forest: RandomForestAlertClassifier, store) -> int:
        """Assign the next version, persist the serialized forest through
        ``store(blob)``, then swap it in."""
        with self._lock:
            version = self._version + 1
            forest.version_ = version
            store(serialize_forest(forest))
            self._forest = forest
            self._version = version
            return version


def classify(slot: ModelSlot, fv: FeatureVector, now: float) -> Prediction:
    """Probability that the alert is true, by the current model; 0.5 with
    the untrained-fallback flag before any model exists."""
    forest, version = slot.get()
    if forest is None:
        return Prediction(
            incident_id=fv.incident_id,
            probability=0.5,
            model_version=version,
            decided_at=now,
            untrained_fallback=True,
        )
    if fv.dimension != forest.n_features_in_:
        raise DimensionMismatch(
            f"feature vector has {fv.dimension} values, model expects "
            f"{forest.n_features_in_}"
        )
    p = float(forest.probability_true(fv.values.reshape(1, -1))[0])
    return Prediction(
        incident_id=fv.incident_id,
        probability=p,
        model_version=version,
        decided_at=now,
    )


class PredictionLog:
    """Record of every prediction, for reporting (ROC against labels)."""

    def __init__(self):
        self._entries: list[dict] = []
        self._lock = threading.Lock()

    def append(self, receipt_id: str, prediction: Prediction) -> None:
        entry = dict(prediction.to_json())
        entry["receipt_id"] = receipt_id
        with self._lock:
            self._entries.append(entry)

    def entries(self) -> list[dict]:
        with self._lock:
            return list(self._entries)

    def dump(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as f:
            for e in self.entries():
                f.write(json.dumps(e) + "\n")

    @staticmethod
    def load(path: str | Path) -> list[dict]:
        entries = []
        with Path(path).open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    entries.append(json.loads(line))
        return entries


class AlertClassifier:
    """Layer 7: score each feature vector and notify the sink."""

    def __init__(
        self,
        slot: ModelSlot,
        notifier: "SlackNotifier",
        prediction_log: PredictionLog | None = None,
    ):
        self.slot = slot
        self.notifier = notifier
        self.prediction_log = prediction_log

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            fv = FeatureVector.decode(msg.payload)
            prediction = classify(self.slot, fv, now=ctx.clock.now())
            receipt = msg.receipt_id()
            posted = self.notifier.notify(ctx, prediction, receipt)
            if posted and self.prediction_log is not None:
                self.prediction_log.append(receipt, prediction)


class Retrainer:
    """Layer 7 sibling: resolve the dataset ticket, train, persist and swap.

    A corrupt dataset aborts the round (previous model keeps serving); a
    degenerate dataset (single class or too small) skips it.
    """

    def __init__(
        self,
        slot: ModelSlot,
        model_params: dict | None = None,
        model_key: str = "model/current",
    ):
        self.slot = slot
        self.model_params = model_params or {}
        self.model_key = model_key

    def __call__(self, ctx, messages: list[Message]) -> None:
        for msg in messages:
            ticket = ClaimTicket.from_json(json.loads(msg.payload.decode("utf-8")))
            try:
                blob = ctx.claim.resolve(ticket)
            except DigestMismatch as e:
                logger.error("retraining round aborted: %s", DatasetCorrupt(str(e)))
                continue
            dataset = deserialize_dataset(blob)
            if dataset.n < 2 or len(np.unique(dataset.y)) < 2:
                logger.info(
                    "retraining round skipped: dataset has %d rows, %d class(es)",
                    dataset.n,
                    len(np.unique(dataset.y)),
                )
                continue
            forest = RandomForestAlertClassifier(**self.model_params)
            forest.fit(dataset.X, dataset.y)
            forest.trained_at_ = ctx.clock.now()
            version = self.slot.publish(
                forest, lambda data: ctx.objects.obj_put(self.model_key, data)
            )
            logger.info(
                "model v%d trained on %d x %d and swapped in", version, dataset.n, dataset.d
            )


# -- notification sink ------------------------------------------------------------------

_REPORT_MARKER = "egress/reported/"


class FileSink:
    """Newline-delimited JSON sink: one object per prediction."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def post(self, body: dict) -> None:
        line = json.dumps(body) + "\n"
        try:
            with self._lock, self.path.open("a", encoding="utf-8") as f:
                f.write(line)
        except OSError as e:
            raise SinkUnreachable(f"cannot append to sink file {self.path}: {e}") from e

    def lines(self) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    out.append(json.loads(line))
        return out


class HttpSink:
    """Slack-style webhook sink: POST {"text": ...} to a URL."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url
        self.timeout = timeout

    def post(self, body: dict) -> None:
        req = urllib.request.Request(
            self.url,
            data=json.dumps(body).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if not 200 <= resp.status < 300:
                    raise SinkUnreachable(f"sink answered HTTP {resp.status}")
        except urllib.error.URLError as e:
            raise SinkUnreachable(f"cannot reach sink at {self.url}: {e}") from e


class SlackNotifier:
    """Posts predictions to the sink, exactly once per receipt id."""

    def __init__(self, sink):
        self.sink = sink

    def notify(self, ctx, prediction: Prediction, receipt_id: str) -> bool:
        """Returns True when this call posted, False on an idempotent skip.

        The marker is written only after a successful post, so a sink outage
        leaves the receipt eligible for redelivery.
        """
        marker = f"{_REPORT_MARKER}{receipt_id}"
        if ctx.docs.doc_exists(marker):
            return False
        self.sink.post({"text": prediction.text(), "receipt_id": receipt_id})
        ctx.docs.doc_put(marker, prediction.to_json())
        if ctx.metrics.has_ingress(receipt_id) and not ctx.metrics.has_egress(
            receipt_id, "reported"
        ):
            ctx.metrics.mark_egress(receipt_id, kind="reported")
        return True
