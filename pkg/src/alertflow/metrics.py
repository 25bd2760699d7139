"""End-to-end latency instrumentation and summary reporting.

A message is marked once on ingress and once on egress; the egress kind
says where it left the pipeline: "reported" when a prediction reached the
notification sink, "saved" when it was persisted without being forwarded
for classification. Summaries are six-number rows (min, first quartile,
median, mean, third quartile, max) with quartiles computed by type-7
linear interpolation: h = (n - 1) * p, interpolating between the floor and
ceil ranks of the sorted durations.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import DuplicateEgress, EmptySeries, UnknownReceipt

EGRESS_KINDS = ("reported", "saved")


@dataclass(frozen=True)
class TimingRecord:
    receipt_id: str
    ingress_ts: float
    egress_ts: float
    kind: str

    @property
    def duration(self) -> float:
        return self.egress_ts - self.ingress_ts


@dataclass(frozen=True)
class SixNumberSummary:
    minimum: float
    q1: float
    median: float
    mean: float
    q3: float
    maximum: float

    def as_row(self) -> tuple[float, float, float, float, float, float]:
        return (self.minimum, self.q1, self.median, self.mean, self.q3, self.maximum)


def summarize(durations: Iterable[float]) -> SixNumberSummary:
    """Six-number summary of a series; EmptySeries when it has no elements."""
    arr = np.asarray(sorted(durations), dtype=np.float64)
    if arr.size == 0:
        raise EmptySeries("no durations to summarize")
    q1, med, q3 = np.quantile(arr, [0.25, 0.5, 0.75], method="linear")
    return SixNumberSummary(
        minimum=float(arr[0]),
        q1=float(q1),
        median=float(med),
        mean=float(arr.mean()),
        q3=float(q3),
        maximum=float(arr[-1]),
    )


def fraction_within(durations: Iterable[float], threshold: float) -> float:
    vals = list(durations)
    if not vals:
        raise EmptySeries("no durations")
    return sum(1 for d in vals if d <= threshold) / len(vals)


class TimingRecorder:
    """Collects ingress/egress marks from concurrent handler instances."""

    def __init__(self, now: Callable[[], float] = time.monotonic):
        self._now = now
        self._ingress: dict[str, float] = {}
        self._records: dict[tuple[str, str], TimingRecord] = {}
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now()

    def mark_ingress(self, receipt_id: str, timestamp: float | None = None) -> None:
        ts = timestamp if timestamp is not None else self._now()
        with self._lock:
            self._ingress[receipt_id] = ts

    def mark_egress(self, receipt_id: str, timestamp: float | None = None, kind: str = "reported") -> None:
        if kind not in EGRESS_KINDS:
            raise ValueError(f"unknown egress kind {kind!r}")
        ts = timestamp if timestamp is not None else self._now()
        with self._lock:
            if receipt_id not in self._ingress:
                raise UnknownReceipt(f"egress mark for unknown receipt {receipt_id!r}")
            if (receipt_id, kind) in self._records:
                raise DuplicateEgress(f"duplicate {kind!r} egress for receipt {receipt_id!r}")
            self._records[(receipt_id, kind)] = TimingRecord(
                receipt_id=receipt_id,
                ingress_ts=self._ingress[receipt_id],
                egress_ts=ts,
                kind=kind,
            )

    def has_ingress(self, receipt_id: str) -> bool:
        with self._lock:
            return receipt_id in self._ingress

    def has_egress(self, receipt_id: str, kind: str) -> bool:
        with self._lock:
            return (receipt_id, kind) in self._records

    def ingress_count(self) -> int:
        with self._lock:
            return len(self._ingress)

    def records(self, kind: str | None = None) -> list[TimingRecord]:
        with self._lock:
            recs = list(self._records.values())
        if kind is not None:
            recs = [r for r in recs if r.kind == kind]
        return sorted(recs, key=lambda r: (r.ingress_ts, r.receipt_id))

    def durations(self, kind: str) -> list[float]:
        return [r.duration for r in self.records(kind)]

    def series(self) -> dict[str, list[float]]:
        return {kind: self.durations(kind) for kind in EGRESS_KINDS}

    def summarize(self, kind: str) -> SixNumberSummary:
        return summarize(self.durations(kind))

    def fraction_within(self, kind: str, threshold: float) -> float:
        return fraction_within(self.durations(kind), threshold)

    # -- persistence for the CLI report command -------------------------------

    def dump(self, path: str | Path) -> None:
        with self._lock:
            recs = list(self._records.values())
        with Path(path).open("w", encoding="utf-8") as f:
            for r in recs:
                f.write(json.dumps({
                    "receipt_id": r.receipt_id,
                    "ingress_ts": r.ingress_ts,
                    "egress_ts": r.egress_ts,
                    "kind": r.kind,
                }) + "\n")

    @staticmethod
    def load_records(path: str | Path) -> list[TimingRecord]:
        records = []
        with Path(path).open(encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                records.append(TimingRecord(
                    receipt_id=rec["receipt_id"],
                    ingress_ts=rec["ingress_ts"],
                    egress_ts=rec["egress_ts"],
                    kind=rec["kind"],
                ))
        return records


# -- rendering ----------------------------------------------------------------

_COLUMNS = ("Type", "Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max.")


def render_table(summaries: dict[str, SixNumberSummary]) -> str:
    """Aligned text table, one row per kind, values at one decimal place."""
    rows = [_COLUMNS]
    for kind, s in summaries.items():
        label = kind.capitalize()
        rows.append((label,) + tuple(f"{v:.1f}" for v in s.as_row()))
    widths = [max(len(r[i]) for r in rows) for i in range(len(_COLUMNS))]
    lines = []
    for r in rows:
        cells = [r[0].ljust(widths[0])] + [r[i].rjust(widths[i]) for i in range(1, len(r))]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def render_histogram_csv(series: dict[str, list[float]], bin_width: float) -> str:
    """CSV histogram: kind,bin_low_seconds,count with fixed-width bins."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    lines = ["kind,bin_low_seconds,count"]
    for kind in sorted(series):
        durations = series[kind]
        if not durations:
            continue
        bins: dict[int, int] = {}
        for d in durations:
            bins[math.floor(d / bin_width)] = bins.get(math.floor(d / bin_width), 0) + 1
        for b in sorted(bins):
            lines.append(f"{kind},{b * bin_width:g},{bins[b]}")
    return "\n".join(lines) + "\n"


def render_report(series: dict[str, list[float]], bin_width: float = 1.0) -> tuple[str, str]:
    """Summary table plus histogram CSV for every non-empty kind."""
    summaries = {k: summarize(v) for k, v in series.items() if v}
    if not summaries:
        raise EmptySeries("no completed timing records")
    return render_table(summaries), render_histogram_csv(series, bin_width)
