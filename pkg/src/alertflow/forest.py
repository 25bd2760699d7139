"""Random forest binary classifier, built from scratch on numpy.

Follows the scikit-learn estimator conventions (``fit`` / ``predict`` /
``predict_proba`` / ``get_params`` / ``set_params``) so the classifier can
be dropped into pipelines and model-selection tooling, without depending
on scikit-learn itself.

Training grows ``n_trees`` independent trees, each on a bootstrap sample,
choosing at every node the Gini-optimal split among a random subset of
``n_candidate_features`` features. Candidate thresholds come from per-column
bins: exact midpoints between consecutive distinct values when a column has
at most ``max_bins`` distinct values, quantile cut points otherwise. Ties
between equally good splits resolve to the lowest feature index, then the
lowest threshold.

Two properties are deliberate:

* fully deterministic given ``seed`` (bit-identical serialized forests);
* invariant to training-row order: rows are put into a canonical order
  (sorted by content digest) before any sampling, so permuting the input
  yields an identical model.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    Corrupt,
    DimensionMismatch,
    EmptyDataset,
    FormatVersionMismatch,
    NonFiniteFeature,
    SingleClass,
)

FOREST_MAGIC = b"AFRF"
FOREST_FORMAT_VERSION = 1
DATASET_MAGIC = b"AFDS"
DATASET_FORMAT_VERSION = 1


# -- input validation helpers ---------------------------------------------------


def check_feature_matrix(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got ndim={X.ndim}")
    if not np.isfinite(X).all():
        raise NonFiniteFeature("feature matrix contains NaN or infinite values")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionMismatch(
            f"expected {n_features} features, got {X.shape[1]}"
        )
    return X


def check_labels(y, n_rows: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_rows:
        raise ValueError(f"labels must be a 1-D array of length {n_rows}")
    vals = np.unique(y)
    if not np.isin(vals, [0, 1]).all():
        raise ValueError("labels must be binary (0/1)")
    return y.astype(np.int8)


# -- datasets -------------------------------------------------------------------


@dataclass
class Dataset:
    """Labeled training examples with a versioned byte-exact wire format."""

    X: np.ndarray
    y: np.ndarray
    incident_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.X = check_feature_matrix(self.X)
        self.y = check_labels(self.y, self.X.shape[0])

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def serialize_dataset(ds: Dataset) -> bytes:
    header = json.dumps(
        {"n": ds.n, "d": ds.d, "incident_ids": ds.incident_ids},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [
        DATASET_MAGIC,
        struct.pack("<II", DATASET_FORMAT_VERSION, len(header)),
        header,
        np.ascontiguousarray(ds.X, dtype="<f8").tobytes(),
        np.ascontiguousarray(ds.y, dtype="<i1").tobytes(),
    ]
    return b"".join(parts)


def deserialize_dataset(data: bytes) -> Dataset:
    if len(data) < 12 or data[:4] != DATASET_MAGIC:
        raise Corrupt("not a dataset blob")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != DATASET_FORMAT_VERSION:
        raise FormatVersionMismatch(f"dataset format version {version} not supported")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        n, d = int(header["n"]), int(header["d"])
        off = 12 + hlen
        x_bytes = n * d * 8
        expected = off + x_bytes + n
        if len(data) != expected:
            raise Corrupt(f"dataset blob has {len(data)} bytes, expected {expected}")
        X = np.frombuffer(data, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        y = np.frombuffer(data, dtype="<i1", count=n, offset=off + x_bytes)
        return Dataset(X=X.copy(), y=y.copy(), incident_ids=list(header["incident_ids"]))
    except Corrupt:
        raise
    except Exception as e:
        raise Corrupt(f"cannot decode dataset blob: {e}") from e


# -- tree growing ---------------------------------------------------------------


@dataclass
class _Tree:
    feature: np.ndarray    # int32, -1 marks a leaf
    threshold: np.ndarray  # float64, real-valued split point (x <= t goes left)
    left: np.ndarray       # int32 child ids
    right: np.ndarray
    count_neg: np.ndarray  # int64 class counts at every node
    count_pos: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def _bin_columns(X: np.ndarray, max_bins: int) -> tuple[np.ndarray, list[np.ndarray]]:
    """Discretize each column; cut points double as split thresholds."""
    n, d = X.shape
    codes = np.empty((n, d), dtype=np.uint8)
    cuts: list[np.ndarray] = []
    grid = np.linspace(0.0, 1.0, max_bins + 1)[1:-1]
    for j in range(d):
        col = X[:, j]
        uniq = np.unique(col)
        if len(uniq) <= max_bins:
            cut = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            cut = np.unique(np.quantile(col, grid))
        codes[:, j] = np.searchsorted(cut, col, side="right")
        cuts.append(cut)
    return codes, cuts


def _grow_tree(
    codes: np.ndarray,
    y: np.ndarray,
    cuts: list[np.ndarray],
    rng: np.random.Generator,
    max_depth: int,
    min_samples_split: int,
    mtry: int,
) -> _Tree:
    n, d = codes.shape
    yf = y.astype(np.float64)
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    count_neg: list[int] = []
    count_pos: list[int] = []

    bin_range = (np.arange(mtry, dtype=np.int32) * 256)[None, :]
    stack: list[tuple[np.ndarray, int, int, bool]] = [(np.arange(n), 0, -1, False)]
    while stack:
        idx, depth, parent, is_right = stack.pop()
        node_id = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        tot = len(idx)
        pos = int(y[idx].sum())
        count_neg.append(tot - pos)
        count_pos.append(pos)
        if parent >= 0:
            if is_right:
                right[parent] = node_id
            else:
                left[parent] = node_id
        if depth >= max_depth or tot < min_samples_split or pos == 0 or pos == tot:
            continue

        cand = rng.choice(d, size=mtry, replace=False)
        cand.sort()
        sub = codes[np.ix_(idx, cand)]
        flat = (sub.astype(np.int32) + bin_range).ravel()
        htot = np.bincount(flat, minlength=mtry * 256).reshape(mtry, 256)
        hpos = np.bincount(flat, weights=np.repeat(yf[idx], mtry), minlength=mtry * 256)
        hpos = hpos.reshape(mtry, 256)

        nl = np.cumsum(htot, axis=1)[:, :-1].astype(np.float64)
        pl = np.cumsum(hpos, axis=1)[:, :-1]
        nr = tot - nl
        pr = pos - pl
        valid = (nl > 0) & (nr > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            gini_l = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
            gini_r = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
            gini = (nl * gini_l + nr * gini_r) / tot
        gini[~valid] = np.inf
        # argmin scans candidates in ascending feature order, then ascending
        # bins, so ties resolve to lowest feature index / lowest threshold
        ci, b = np.unravel_index(np.argmin(gini), gini.shape)
        if not np.isfinite(gini[ci, b]):
            continue
        j = int(cand[ci])
        go_left = sub[:, ci] <= b
        feature[node_id] = j
        threshold[node_id] = float(cuts[j][b])
        stack.append((idx[~go_left], depth + 1, node_id, True))
        stack.append((idx[go_left], depth + 1, node_id, False))

    return _Tree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        count_neg=np.asarray(count_neg, dtype=np.int64),
        count_pos=np.asarray(count_pos, dtype=np.int64),
    )


def _tree_proba(tree: _Tree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(len(X), dtype=np.int32)
    while True:
        internal = tree.feature[node] >= 0
        if not internal.any():
            break
        idx = np.nonzero(internal)[0]
        cur = node[idx]
        go_left = X[idx, tree.feature[cur]] <= tree.threshold[cur]
        node[idx] = np.where(go_left, tree.left[cur], tree.right[cur])
    pos = tree.count_pos[node].astype(np.float64)
    tot = pos + tree.count_neg[node]
    return pos / tot


def _canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Content-derived row order, so bootstrap sampling ignores input order."""
    digests = [
        hashlib.blake2b(X[i].tobytes() + bytes([int(y[i])]), digest_size=16).digest()
        for i in range(len(y))
    ]
    return np.asarray(sorted(range(len(y)), key=digests.__getitem__), dtype=np.intp)


class RandomForestAlertClassifier:
    """Bootstrap-aggregated Gini decision trees for true/false alert triage.

    Parameters mirror the usual random-forest knobs: ``n_trees``,
    ``max_depth``, ``min_samples_split``, ``n_candidate_features`` (None
    means floor(sqrt(d))), ``seed`` and ``max_bins`` (<= 255).
    """

    def __init__(
        self,
        n_trees: int = 100,
        max_depth: int = 16,
        min_samples_split: int = 2,
        n_candidate_features: int | None = None,
        seed: int = 0,
        max_bins: int = 255,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.n_candidate_features = n_candidate_features
        self.seed = seed
        self.max_bins = max_bins

    # sklearn-style parameter plumbing
    def get_params(self, deep: bool = True) -> dict:
        return {
            "n_trees": self.n_trees,
            "max_depth": self.max_depth,
            "min_samples_split": self.min_samples_split,
            "n_candidate_features": self.n_candidate_features,
            "seed": self.seed,
            "max_bins": self.max_bins,
        }

    def set_params(self, **params) -> "RandomForestAlertClassifier":
        valid = self.get_params()
        for k, v in params.items():
            if k not in valid:
                raise ValueError(f"unknown parameter {k!r}")
            setattr(self, k, v)
        return self

    def fit(self, X, y, allow_single_class: bool = False) -> "RandomForestAlertClassifier":
        """Grow the forest. Requires >= 2 rows and both classes present
        (the single-class guard can be lifted for degenerate-purity tests)."""
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if not 2 <= self.max_bins <= 255:
            raise ValueError("max_bins must be in [2, 255]")
        X = check_feature_matrix(X)
        n, d = X.shape
        if n < 2:
            raise EmptyDataset(f"need at least 2 examples, got {n}")
        y = check_labels(y, n)
        if len(np.unique(y)) < 2 and not allow_single_class:
            raise SingleClass("training labels contain a single class")

        order = _canonical_order(X, y)
        Xc, yc = X[order], y[order]
        codes, cuts = _bin_columns(Xc, self.max_bins)
        mtry = self.n_candidate_features
        if mtry is None:
            mtry = max(1, int(np.floor(np.sqrt(d))))
        mtry = min(mtry, d)

        seeds = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        trees = []
        for ss in seeds:
            rng = np.random.Generator(np.random.PCG64(ss))
            boot = rng.integers(0, n, size=n)
            trees.append(
                _grow_tree(
                    codes[boot], yc[boot], cuts, rng,
                    self.max_depth, self.min_samples_split, mtry,
                )
            )

        self.trees_ = trees
        self.n_features_in_ = d
        self.classes_ = np.array([0, 1])
        self.version_ = getattr(self, "version_", 0)
        self.trained_at_ = getattr(self, "trained_at_", 0.0)
        return self

    def _check_fitted(self) -> None:
        if not getattr(self, "trees_", None):
            raise ValueError("forest has no trees; call fit() first")

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, shape (n, 2); column 1 is the true-alert
        probability: the mean over trees of the reached leaf's positive
        fraction."""
        self._check_fitted()
        X = check_feature_matrix(X, self.n_features_in_)
        acc = np.zeros(len(X), dtype=np.float64)
        for tree in self.trees_:
            acc += _tree_proba(tree, X)
        p = acc / len(self.trees_)
        return np.column_stack([1.0 - p, p])

    def probability_true(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, 1]

    def predict(self, X) -> np.ndarray:
        return (self.probability_true(X) >= 0.5).astype(np.int64)


# -- forest serialization ---------------------------------------------------------

_TREE_ARRAYS = ("feature", "threshold", "left", "right", "count_neg", "count_pos")
_TREE_DTYPES = ("<i4", "<f8", "<i4", "<i4", "<i8", "<i8")


def serialize_forest(forest: RandomForestAlertClassifier) -> bytes:
    """Versioned deterministic binary encoding of a fitted forest."""
    forest._check_fitted()
    header = json.dumps(
        {
            "params": forest.get_params(),
            "d": forest.n_features_in_,
            "version": forest.version_,
            "trained_at": forest.trained_at_,
            "tree_sizes": [t.n_nodes for t in forest.trees_],
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    parts = [FOREST_MAGIC, struct.pack("<II", FOREST_FORMAT_VERSION, len(header)), header]
    for tree in forest.trees_:
        for name, dtype in zip(_TREE_ARRAYS, _TREE_DTYPES):
            parts.append(np.ascontiguousarray(getattr(tree, name), dtype=dtype).tobytes())
    return b"".join(parts)


def deserialize_forest(data: bytes) -> RandomForestAlertClassifier:
    if len(data) < 12 or data[:4] != FOREST_MAGIC:
        raise Corrupt("not a forest blob")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != FOREST_FORMAT_VERSION:
        raise FormatVersionMismatch(f"forest format version {version} not supported")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        sizes = [int(s) for s in header["tree_sizes"]]
        item_bytes = [np.dtype(dt).itemsize for dt in _TREE_DTYPES]
        expected = 12 + hlen + sum(sz * b for sz in sizes for b in item_bytes)
        if len(data) != expected:
            raise Corrupt(f"forest blob has {len(data)} bytes, expected {expected}")
        off = 12 + hlen
        trees = []
        for sz in sizes:
            arrays = {}
            for name, dtype in zip(_TREE_ARRAYS, _TREE_DTYPES):
                nbytes = sz * np.dtype(dtype).itemsize
                arrays[name] = np.frombuffer(data, dtype=dtype, count=sz, offset=off).copy()
                off += nbytes
            trees.append(_Tree(**arrays))
        forest = RandomForestAlertClassifier(**header["params"])
        forest.trees_ = trees
        forest.n_features_in_ = int(header["d"])
        forest.classes_ = np.array([0, 1])
        forest.version_ = int(header["version"])
        forest.trained_at_ = float(header["trained_at"])
        return forest
    except (Corrupt, FormatVersionMismatch):
        raise
    except Exception as e:
        raise Corrupt(f"cannot decode forest blob: {e}") from e
