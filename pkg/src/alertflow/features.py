"""Deterministic featurization of incidents against persisted history.

Feature layout for a vector of dimension d (default 2500):

    [0:4]    per-service counts of triggered incidents in the trailing
             1 h / 6 h / 24 h / 7 d windows
    [4]      seconds since the service's previous triggered incident,
             capped at 7 d (0 when there is none)
    [5]      z-score of the metric value against the service's historical
             values for the same metric (0 with fewer than 2 history
             points; population standard deviation; 0 when it is zero)
    [6:9]    severity one-hot: high / low / other
    [9:13]   event-kind one-hot: triggered / acknowledged / resolved / other
    [13:]    hashed one-hots of service id and metric name, each over half
             of the remaining buckets, via a seeded CRC-32

Missing history never fails: every history-derived feature falls back to
zero. Given a frozen history snapshot, output is bit-identical across runs.
"""

from __future__ import annotations

import zlib

import numpy as np

from .events import EVENT_KINDS, IncidentEvent, format_timestamp

COUNT_WINDOWS = (3_600.0, 21_600.0, 86_400.0, 604_800.0)
RECENCY_CAP = 604_800.0
HISTORY_SPAN = max(COUNT_WINDOWS)
SEVERITY_VOCAB = ("high", "low")
_FIXED = len(COUNT_WINDOWS) + 1 + 1 + (len(SEVERITY_VOCAB) + 1) + len(EVENT_KINDS)

INCIDENT_KEY_PREFIX = "incident/"


def incident_doc_key(event: IncidentEvent) -> str:
    """Key scheme: incident/<service-id>/<created-at-iso>/<receipt-id>, so
    one prefix query serves a service's whole history."""
    return (
        f"{INCIDENT_KEY_PREFIX}{event.service_id}/"
        f"{format_timestamp(event.created_at)}/{event.receipt_id}"
    )


def _bucket(value: str, n_buckets: int, seed: int) -> int:
    return zlib.crc32(f"{seed}:{value}".encode("utf-8")) % n_buckets


class ServiceHistory:
    """The slice of persisted events one enrichment looks at."""

    def __init__(self, events: list[dict]):
        # each entry is an IncidentEvent JSON body
        self.events = events

    def triggered_timestamps(self) -> list[float]:
        return [e["created_at"] for e in self.events if e["kind"] == "triggered"]

    def metric_values(self, metric_name: str) -> list[float]:
        return [
            e["metric_value"] for e in self.events if e["metric_name"] == metric_name
        ]


def load_service_history(docs, event: IncidentEvent, page_size: int = 500) -> ServiceHistory:
    """Pull the service's events in (t - 7 d, t], excluding the event itself."""
    prefix = f"{INCIDENT_KEY_PREFIX}{event.service_id}/"
    window = (event.created_at - HISTORY_SPAN, event.created_at)
    bodies: list[dict] = []
    token = None
    while True:
        res = docs.doc_query(prefix, window, limit=page_size, continuation=token)
        for doc in res.documents:
            if doc.body.get("receipt_id") != event.receipt_id:
                bodies.append(doc.body)
        if res.continuation is None:
            return ServiceHistory(bodies)
        token = res.continuation


class Featurizer:
    def __init__(self, dimension: int = 2500, hash_seed: int = 0):
        if dimension < _FIXED + 2:
            raise ValueError(f"dimension must be at least {_FIXED + 2}")
        self.dimension = dimension
        self.hash_seed = hash_seed
        remaining = dimension - _FIXED
        self._service_buckets = remaining // 2
        self._metric_buckets = remaining - self._service_buckets

    def enrich(self, event: IncidentEvent, history: ServiceHistory) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=np.float64)
        t = event.created_at

        triggered = history.triggered_timestamps()
        for i, window in enumerate(COUNT_WINDOWS):
            v[i] = sum(1 for ts in triggered if t - window <= ts <= t)

        idx = len(COUNT_WINDOWS)
        prior = [ts for ts in triggered if ts <= t]
        v[idx] = min(t - max(prior), RECENCY_CAP) if prior else 0.0

        idx += 1
        values = history.metric_values(event.metric_name)
        if len(values) >= 2:
            arr = np.asarray(values, dtype=np.float64)
            std = float(arr.std())
            if std > 0.0:
                v[idx] = (event.metric_value - float(arr.mean())) / std

        idx += 1
        severity = event.severity.lower()
        if severity in SEVERITY_VOCAB:
            v[idx + SEVERITY_VOCAB.index(severity)] = 1.0
        else:
            v[idx + len(SEVERITY_VOCAB)] = 1.0

        idx += len(SEVERITY_VOCAB) + 1
        v[idx + EVENT_KINDS.index(event.kind)] = 1.0

        idx += len(EVENT_KINDS)
        v[idx + _bucket(event.service_id, self._service_buckets, self.hash_seed)] = 1.0
        v[
            idx
            + self._service_buckets
            + _bucket(event.metric_name, self._metric_buckets, self.hash_seed)
        ] = 1.0
        return v

    def enrich_from_store(self, docs, event: IncidentEvent) -> np.ndarray:
        return self.enrich(event, load_service_history(docs, event))
