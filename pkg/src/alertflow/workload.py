"""Synthetic PagerDuty-style workload with planted signal and known labels.

Incident triggers arrive as a Poisson process at the configured rate. Each
incident is secretly a true or a false alert; the metric value and urgency
of its trigger webhook correlate with that hidden label in proportion to
``signal_strength`` (at 0 the classes are indistinguishable). Follow-up
acknowledge/resolve webhooks are emitted so that the pipeline's labeling
rule (acknowledged before resolved = true alert) recovers the ground truth
exactly. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .events import format_timestamp

DEFAULT_BASE_EPOCH = 1_750_000_000.0  # an arbitrary fixed stream start

METRIC_NAMES = ("cpu_load", "mem_used_pct", "disk_io_wait", "net_errors", "latency_p99")


@dataclass
class WorkloadConfig:
    rate_per_minute: float = 120.0
    duration_seconds: float = 60.0
    seed: int = 0
    n_services: int = 2000
    true_alert_fraction: float = 0.3
    signal_strength: float = 0.8
    emit_lifecycle: bool = True
    base_epoch: float = DEFAULT_BASE_EPOCH

    def __post_init__(self):
        if not 0 <= self.rate_per_minute <= 600:
            raise ValueError("rate_per_minute must be in [0, 600]")
        if self.duration_seconds < 0:
            raise ValueError("duration_seconds must be >= 0")
        if self.n_services < 1:
            raise ValueError("n_services must be >= 1")
        if not 0 <= self.true_alert_fraction <= 1:
            raise ValueError("true_alert_fraction must be in [0, 1]")
        if not 0 <= self.signal_strength <= 1:
            raise ValueError("signal_strength must be in [0, 1]")


@dataclass(frozen=True)
class WorkloadEvent:
    time: float  # seconds since stream start
    kind: str
    incident_id: str
    payload: bytes


@dataclass
class Workload:
    events: list[WorkloadEvent]
    labels: dict[str, int]
    config: WorkloadConfig

    def triggered_count(self) -> int:
        return sum(1 for e in self.events if e.kind == "triggered")


@dataclass(frozen=True)
class _Service:
    service_id: str
    metric: str
    mu: float
    sigma: float

    @property
    def threshold(self) -> float:
        return self.mu + 2.0 * self.sigma


def _webhook(event_name: str, incident_id: str, svc: _Service, urgency: str,
             value: float, created_at_iso: str) -> bytes:
    body = {
        "event": event_name,
        "incident": {
            "id": incident_id,
            "created_at": created_at_iso,
            "urgency": urgency,
            "service": {"id": svc.service_id, "name": f"name-of-{svc.service_id}"},
            "alerts": [
                {
                    "alert_key": f"{svc.metric}-breach",
                    "custom_details": {
                        "metric": svc.metric,
                        "value": round(value, 6),
                        "threshold": round(svc.threshold, 6),
                    },
                }
            ],
        },
    }
    return json.dumps(body, separators=(",", ":")).encode("utf-8")


def generate_workload(config: WorkloadConfig) -> Workload:
    rng = random.Random(config.seed)
    services = [
        _Service(
            service_id=f"svc-{i:04d}",
            metric=METRIC_NAMES[i % len(METRIC_NAMES)],
            mu=rng.uniform(10.0, 100.0),
            sigma=rng.uniform(1.0, 5.0),
        )
        for i in range(config.n_services)
    ]

    events: list[WorkloadEvent] = []
    labels: dict[str, int] = {}
    s = config.signal_strength
    t = 0.0
    seq = 0
    rate_per_second = config.rate_per_minute / 60.0
    while rate_per_second > 0:
        t += rng.expovariate(rate_per_second)
        if t > config.duration_seconds:
            break
        seq += 1
        incident_id = f"I-{config.seed}-{seq:06d}"
        svc = services[rng.randrange(config.n_services)]
        is_true = rng.random() < config.true_alert_fraction
        labels[incident_id] = int(is_true)

        # every alert breaches its threshold; true alerts breach harder and
        # run as "high" urgency more often, scaled by the signal strength
        excess = abs(rng.gauss(0.0, 0.3))
        if is_true:
            excess += 4.0 * s
        value = svc.threshold + svc.sigma * excess
        p_high = 0.5 + (0.45 * s if is_true else -0.45 * s)
        urgency = "high" if rng.random() < p_high else "low"

        created = config.base_epoch + t
        events.append(
            WorkloadEvent(
                time=t,
                kind="triggered",
                incident_id=incident_id,
                payload=_webhook(
                    "incident.trigger", incident_id, svc, urgency, value,
                    format_timestamp(created),
                ),
            )
        )
        if not config.emit_lifecycle:
            continue
        if is_true:
            ack_at = t + rng.uniform(30.0, 300.0)
            resolve_at = ack_at + rng.uniform(60.0, 600.0)
            events.append(
                WorkloadEvent(
                    time=ack_at,
                    kind="acknowledged",
                    incident_id=incident_id,
                    payload=_webhook(
                        "incident.acknowledge", incident_id, svc, urgency, value,
                        format_timestamp(config.base_epoch + ack_at),
                    ),
                )
            )
        else:
            resolve_at = t + rng.uniform(60.0, 900.0)
        events.append(
            WorkloadEvent(
                time=resolve_at,
                kind="resolved",
                incident_id=incident_id,
                payload=_webhook(
                    "incident.resolve", incident_id, svc, urgency, value,
                    format_timestamp(config.base_epoch + resolve_at),
                ),
            )
        )

    events.sort(key=lambda e: (e.time, e.incident_id, e.kind))
    return Workload(events=events, labels=labels, config=config)
