"""ROC curve and AUC for binary scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, SingleClass


@dataclass(frozen=True)
class RocCurve:
    """Points (false-positive rate, true-positive rate), FPR nondecreasing,
    anchored at (0,0) and (1,1); area by the trapezoid rule."""

    points: list[tuple[float, float]]
    auc: float


def roc_points(scores, labels) -> RocCurve:
    """Threshold sweep over descending unique scores, ties grouped."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.ndim != 1 or y.ndim != 1 or len(s) != len(y):
        raise LengthMismatch(f"scores ({len(s)}) and labels ({len(y)}) differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores must be finite")
    if not np.isin(np.unique(y), [0, 1]).all():
        raise ValueError("labels must be binary (0/1)")
    y = y.astype(np.int64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("both classes must be present to sweep a ROC curve")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep one point per distinct score: the last index of each tie group
    last_of_group = np.nonzero(np.diff(s_sorted, append=np.nan))[0]
    tpr = tp[last_of_group] / n_pos
    fpr = fp[last_of_group] / n_neg

    points = [(0.0, 0.0)]
    for x, t in zip(fpr, tpr):
        points.append((float(x), float(t)))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))

    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    auc = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1])) / 2.0)  # trapezoid rule
    return RocCurve(points=points, auc=auc)


def auc_score(scores, labels) -> float:
    return roc_points(scores, labels).auc
