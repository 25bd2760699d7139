"""Pipeline domain records and their wire encodings.

Messages between layers carry JSON payloads. Feature vectors pack their
float64 values as base64 so transport is bit-exact; raw webhook bodies
ride along either inline (base64) or as a claim ticket.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any

import numpy as np

from .store import ClaimTicket

EVENT_KINDS = ("triggered", "acknowledged", "resolved", "other")


def parse_timestamp(value: str) -> float:
    """ISO-8601 (Z or offset) to epoch seconds."""
    return datetime.fromisoformat(value.replace("Z", "+00:00")).timestamp()


def format_timestamp(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).isoformat()


@dataclass(frozen=True)
class IncidentEvent:
    """Unified internal record produced by the layer-1 converter."""

    receipt_id: str
    source: str
    kind: str
    incident_id: str
    service_id: str
    severity: str
    metric_name: str
    metric_value: float
    threshold: float
    created_at: float
    raw_ref: bytes | ClaimTicket

    def to_json(self) -> dict[str, Any]:
        if isinstance(self.raw_ref, ClaimTicket):
            raw = {"ticket": self.raw_ref.to_json()}
        else:
            raw = {"inline_b64": base64.b64encode(self.raw_ref).decode("ascii")}
        return {
            "receipt_id": self.receipt_id,
            "source": self.source,
            "kind": self.kind,
            "incident_id": self.incident_id,
            "service_id": self.service_id,
            "severity": self.severity,
            "metric_name": self.metric_name,
            "metric_value": self.metric_value,
            "threshold": self.threshold,
            "created_at": self.created_at,
            "raw_ref": raw,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "IncidentEvent":
        raw = obj["raw_ref"]
        if "ticket" in raw:
            raw_ref: bytes | ClaimTicket = ClaimTicket.from_json(raw["ticket"])
        else:
            raw_ref = base64.b64decode(raw["inline_b64"])
        kind = obj["kind"]
        return cls(
            receipt_id=obj["receipt_id"],
            source=obj["source"],
            kind=kind if kind in EVENT_KINDS else "other",
            incident_id=obj["incident_id"],
            service_id=obj["service_id"],
            severity=obj["severity"],
            metric_name=obj["metric_name"],
            metric_value=float(obj["metric_value"]),
            threshold=float(obj["threshold"]),
            created_at=float(obj["created_at"]),
            raw_ref=raw_ref,
        )

    def encode(self) -> bytes:
        return json.dumps(self.to_json(), separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, payload: bytes) -> "IncidentEvent":
        return cls.from_json(json.loads(payload.decode("utf-8")))


@dataclass(frozen=True)
class FeatureVector:
    incident_id: str
    values: np.ndarray
    label: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def dimension(self) -> int:
        return len(self.values)

    def encode(self) -> bytes:
        obj = {
            "incident_id": self.incident_id,
            "d": self.dimension,
            "values_b64": base64.b64encode(
                np.ascontiguousarray(self.values, dtype="<f8").tobytes()
            ).decode("ascii"),
            "label": self.label,
        }
        return json.dumps(obj, separators=(",", ":")).encode("utf-8")

    @classmethod
    def decode(cls, payload: bytes) -> "FeatureVector":
        obj = json.loads(payload.decode("utf-8"))
        values = np.frombuffer(base64.b64decode(obj["values_b64"]), dtype="<f8")
        if len(values) != obj["d"]:
            raise ValueError("feature vector length does not match its header")
        return cls(incident_id=obj["incident_id"], values=values.copy(), label=obj["label"])


@dataclass(frozen=True)
class Prediction:
    incident_id: str
    probability: float
    model_version: int
    decided_at: float
    untrained_fallback: bool = False

    def text(self) -> str:
        return (
            f"{self.incident_id}: true-alert probability {self.probability:g} "
            f"(model v{self.model_version})"
        )

    def to_json(self) -> dict[str, Any]:
        return {
            "incident_id": self.incident_id,
            "probability": self.probability,
            "model_version": self.model_version,
            "decided_at": self.decided_at,
            "untrained_fallback": self.untrained_fallback,
        }


@dataclass(frozen=True)
class RouteDecision:
    forward: bool
    persist: bool = True
