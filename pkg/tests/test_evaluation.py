import random

import numpy as np
import pytest

from alertflow.errors import LengthMismatch, SingleClass
from alertflow.evaluation import auc_score, roc_points


def concordance_oracle(scores, labels):
    """Fraction of (positive, negative) pairs ranked correctly; ties count 1/2."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestRocCurve:
    def test_perfect_separation(self):
        assert auc_score([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == pytest.approx(1.0)

    def test_chance_level(self):
        assert auc_score([0.9, 0.2, 0.8, 0.1], [1, 0, 0, 1]) == pytest.approx(0.5)

    def test_all_scores_equal_is_diagonal(self):
        curve = roc_points([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert curve.points == [(0.0, 0.0), (1.0, 1.0)]
        assert curve.auc == pytest.approx(0.5)

    def test_anchored_and_monotone(self):
        rng = random.Random(1)
        scores = [rng.random() for _ in range(50)]
        labels = [rng.randint(0, 1) for _ in range(50)]
        labels[0], labels[1] = 0, 1
        curve = roc_points(scores, labels)
        assert curve.points[0] == (0.0, 0.0)
        assert curve.points[-1] == (1.0, 1.0)
        xs = [p[0] for p in curve.points]
        ys = [p[1] for p in curve.points]
        assert xs == sorted(xs)
        assert ys == sorted(ys)
        assert 0.0 <= curve.auc <= 1.0

    def test_single_class_rejected(self):
        with pytest.raises(SingleClass):
            roc_points([0.1, 0.2], [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            roc_points([0.1, 0.2], [1])

    def test_matches_concordance_oracle(self):
        rng = random.Random(99)
        for trial in range(200):
            n = rng.randint(2, 200)
            # draw from a small value set so score ties actually occur
            scores = [rng.choice([0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]) for _ in range(n)]
            labels = [rng.randint(0, 1) for _ in range(n)]
            if len(set(labels)) < 2:
                labels[0] = 1 - labels[0]
            assert auc_score(scores, labels) == pytest.approx(
                concordance_oracle(scores, labels), abs=1e-9
            )

    def test_matches_oracle_continuous_scores(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 200))
            scores = rng.normal(size=n)
            labels = rng.integers(0, 2, size=n)
            if len(np.unique(labels)) < 2:
                labels[0] = 1 - labels[0]
            assert auc_score(scores, labels) == pytest.approx(
                concordance_oracle(scores.tolist(), labels.tolist()), abs=1e-9
            )
