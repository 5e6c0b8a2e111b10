"""Gradient-boosted decision trees with exact greedy second-order splits.

The fitted ensemble serves two purposes: it is the row-level baseline fraud
scorer, and its leaf activations are the multi-hot cross features that feed
the graph model.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset

FORMAT_NAME = "customsgnn.gbdt"
FORMAT_VERSION = 1

FEATURE_NAMES = [
    "log_declared_value",
    "log_quantity",
    "log_gross_weight",
    "log_unit_value",
    "log_value_per_kg",
    "tariff_rate",
    "tax_ratio",
    "log_paid_tax",
]


def transaction_features(d: Dataset) -> np.ndarray:
    """Numeric engineered features of each transaction (categorical keys excluded)."""
    value = d["declared_value"].astype(float)
    quantity = d["quantity"].astype(float)
    weight = d["gross_weight"].astype(float)
    tax = d["paid_tax"].astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tax_ratio = np.where(value > 0, tax / value, 0.0)
    return np.column_stack(
        [
            np.log1p(value),
            np.log(quantity),
            np.log(weight),
            np.log1p(value / quantity),
            np.log1p(value / weight),
            d["tariff_rate"].astype(float),
            tax_ratio,
            np.log1p(tax),
        ]
    )


@dataclass(frozen=True)
class DecisionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf.

    ``leaf_index`` holds the global (ensemble-wide) index of each leaf and -1
    for internal nodes.  Rows with ``x[feature] < threshold`` or a missing
    value go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    leaf_index: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depth[self.left[node]] = depth[self.right[node]] = depth[node] + 1
        return int(depth.max())

    def route(self, X: np.ndarray) -> np.ndarray:
        """Node id of the leaf reached by each row."""
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            x = X[rows, feat[rows]]
            go_left = ~(x >= self.threshold[node[rows]])  # NaN goes left
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def rules(self, feature_names: Optional[Sequence[str]] = None) -> dict[int, str]:
        """Decision rule (root-to-leaf conjunction) for every global leaf index."""
        names = feature_names or [f"x{i}" for i in range(int(self.feature.max(initial=-1)) + 1)]
        out: dict[int, str] = {}
        stack = [(0, [])]
        while stack:
            node, terms = stack.pop()
            f = self.feature[node]
            if f < 0:
                out[int(self.leaf_index[node])] = " AND ".join(terms) or "TRUE"
                continue
            t = self.threshold[node]
            stack.append((self.right[node], terms + [f"{names[f]} >= {t:.6g}"]))
            stack.append((self.left[node], terms + [f"{names[f]} < {t:.6g}"]))
        return out


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple
    learning_rate: float
    base_score: float
    n_features: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def total_leaves(self) -> int:
        return sum(t.n_leaves for t in self.trees)

    def to_json(self) -> str:
        def enc(tree: DecisionTree) -> dict:
            return {
                "feature": tree.feature.tolist(),
                "threshold": [repr(float(v)) for v in tree.threshold],
                "left": tree.left.tolist(),
                "right": tree.right.tolist(),
                "value": [repr(float(v)) for v in tree.value],
                "leaf_index": tree.leaf_index.tolist(),
            }

        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "learning_rate": repr(float(self.learning_rate)),
            "base_score": repr(float(self.base_score)),
            "n_features": self.n_features,
            "trees": [enc(t) for t in self.trees],
        }
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
            raise ValueError("not a supported tree-ensemble document")
        trees = tuple(
            DecisionTree(
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray([float(v) for v in t["threshold"]]),
                left=np.asarray(t["left"], dtype=np.int64),
                right=np.asarray(t["right"], dtype=np.int64),
                value=np.asarray([float(v) for v in t["value"]]),
                leaf_index=np.asarray(t["leaf_index"], dtype=np.int64),
            )
            for t in doc["trees"]
        )
        return cls(trees, float(doc["learning_rate"]), float(doc["base_score"]), int(doc["n_features"]))


@dataclass(frozen=True)
class CrossFeatureMatrix:
    """Multi-hot leaf activations stored as one global leaf index per tree."""

    indices: np.ndarray  # (n_rows, n_trees)
    width: int

    @property
    def n_rows(self) -> int:
        return self.indices.shape[0]

    def to_csr(self) -> sp.csr_matrix:
        n, t = self.indices.shape
        data = np.ones(n * t)
        indptr = np.arange(0, n * t + 1, t)
        return sp.csr_matrix((data, self.indices.ravel(), indptr), shape=(n, self.width))

    def to_dense(self) -> np.ndarray:
        return self.to_csr().toarray()


# ---------------------------------------------------------------------------
# fitting


class _TreeBuilder:
    def __init__(self, X, grad, hess, max_depth, reg_lambda, min_child_weight, min_split_gain, leaf_offset):
        self.X, self.g, self.h = X, grad, hess
        self.max_depth = max_depth
        self.lam = reg_lambda
        self.min_child_weight = min_child_weight
        self.min_split_gain = min_split_gain
        self.next_leaf = leaf_offset
        self.feature, self.threshold, self.left, self.right, self.value, self.leaf = [], [], [], [], [], []

    def _new_node(self) -> int:
        for arr, fill in ((self.feature, -1), (self.threshold, np.nan), (self.left, -1), (self.right, -1)):
            arr.append(fill)
        self.value.append(0.0)
        self.leaf.append(-1)
        return len(self.feature) - 1

    def best_split(self, rows: np.ndarray):
        """Return (gain, feature, threshold) of the best split or None.

        Gains within a relative 1e-12 of the maximum count as ties, resolved
        by lowest feature index, then lowest threshold.
        """
        X = self.X[rows]
        g, h = self.g[rows], self.h[rows]
        G, H = g.sum(), h.sum()
        parent = G * G / (H + self.lam)
        candidates = []
        for f in range(X.shape[1]):
            x = X[:, f]
            missing = np.isnan(x)
            gm, hm = g[missing].sum(), h[missing].sum()
            present = np.flatnonzero(~missing)
            if len(present) < 2:
                continue
            order = present[np.argsort(x[present], kind="stable")]
            xs = x[order]
            gl = gm + np.cumsum(g[order])[:-1]
            hl = hm + np.cumsum(h[order])[:-1]
            gr, hr = G - gl, H - hl
            valid = (xs[1:] > xs[:-1]) & (hl >= self.min_child_weight) & (hr >= self.min_child_weight)
            if valid.any():
                gain = 0.5 * (gl * gl / (hl + self.lam) + gr * gr / (hr + self.lam) - parent)
                candidates.append((f, np.where(valid, gain, -np.inf), xs))
        if not candidates:
            return None
        best = max(float(c[1].max()) for c in candidates)
        if not best > self.min_split_gain:
            return None
        for f, gain, xs in candidates:
            hits = np.flatnonzero(gain >= best - _tie_tol(best))
            if len(hits):
                i = int(hits[0])
                return float(gain[i]), f, float(0.5 * (xs[i] + xs[i + 1]))
        return None

    def grow(self, rows: np.ndarray, depth: int) -> int:
        node = self._new_node()
        split = self.best_split(rows) if depth < self.max_depth else None
        if split is None:
            G, H = self.g[rows].sum(), self.h[rows].sum()
            self.value[node] = -G / (H + self.lam)
            self.leaf[node] = self.next_leaf
            self.next_leaf += 1
            return node
        _, f, thr = split
        x = self.X[rows, f]
        go_left = ~(x >= thr)
        self.feature[node], self.threshold[node] = f, thr
        self.left[node] = self.grow(rows[go_left], depth + 1)
        self.right[node] = self.grow(rows[~go_left], depth + 1)
        return node

    def tree(self) -> DecisionTree:
        return DecisionTree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=float),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=float),
            leaf_index=np.asarray(self.leaf, dtype=np.int64),
        )


def _tie_tol(gain: float) -> float:
    return 1e-12 * max(1.0, abs(gain))


def fit_gbdt(
    features,
    labels,
    n_trees: int = 100,
    max_depth: int = 4,
    learning_rate: float = 0.3,
    reg_lambda: float = 1.0,
    min_child_weight: float = 1.0,
    min_split_gain: float = 0.0,
    base_score: Optional[float] = None,
) -> TreeEnsemble:
    """Fit a logistic-loss boosted ensemble.

    ``base_score`` is a margin (log-odds); by default the log-odds of the
    positive rate.  Each stage grows one tree by exact greedy search over
    all midpoints between distinct feature values.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ValueError("feature matrix must be a nonempty 2-D array")
    if len(y) != len(X):
        raise ValueError("features and labels have different lengths")
    if len(X) < 2:
        raise ValueError("need at least two rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    if y.min() == y.max():
        raise ValueError("labels contain a single class")
    if base_score is None:
        p = y.mean()
        base_score = float(np.log(p / (1 - p)))
    margin = np.full(len(y), base_score)
    trees = []
    offset = 0
    rows = np.arange(len(y))
    for _ in range(n_trees):
        p = expit(margin)
        builder = _TreeBuilder(X, p - y, p * (1 - p), max_depth, reg_lambda, min_child_weight, min_split_gain, offset)
        builder.grow(rows, 0)
        tree = builder.tree()
        trees.append(tree)
        offset += tree.n_leaves
        margin = margin + learning_rate * tree.value[tree.route(X)]
    return TreeEnsemble(tuple(trees), float(learning_rate), float(base_score), X.shape[1])


def _check_rows(e: TreeEnsemble, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != e.n_features:
        raise ValueError(f"expected {e.n_features} features, got {X.shape[1]}")
    return X


def leaf_indices(e: TreeEnsemble, rows) -> np.ndarray:
    """Global leaf index reached in every tree; shape (n_rows, n_trees), or (n_trees,) for one row."""
    single = np.asarray(rows).ndim == 1
    X = _check_rows(e, rows)
    out = np.empty((len(X), e.n_trees), dtype=np.int64)
    for t, tree in enumerate(e.trees):
        out[:, t] = tree.leaf_index[tree.route(X)]
    return out[0] if single else out


def encode_multihot(e: TreeEnsemble, d) -> CrossFeatureMatrix:
    """Cross-feature matrix for a :class:`Dataset` or a raw feature matrix."""
    X = transaction_features(d) if isinstance(d, Dataset) else d
    return CrossFeatureMatrix(leaf_indices(e, np.atleast_2d(X)), e.total_leaves)


def gbdt_margin(e: TreeEnsemble, rows) -> np.ndarray:
    X = _check_rows(e, rows)
    margin = np.full(len(X), e.base_score)
    for tree in e.trees:
        margin += e.learning_rate * tree.value[tree.route(X)]
    return margin


def gbdt_score(e: TreeEnsemble, rows):
    """Fraud probability of one row (float) or many rows (array)."""
    p = expit(gbdt_margin(e, rows))
    return float(p[0]) if np.asarray(rows).ndim == 1 else p


# ---------------------------------------------------------------------------
# estimator interface


class GradientBoostedTrees(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``predict_proba`` scores, ``transform`` gives cross features."""

    def __init__(
        self,
        n_trees=100,
        max_depth=4,
        learning_rate=0.3,
        reg_lambda=1.0,
        min_child_weight=1.0,
        min_split_gain=0.0,
        base_score=None,
    ):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.learning_rate = learning_rate
        self.reg_lambda = reg_lambda
        self.min_child_weight = min_child_weight
        self.min_split_gain = min_split_gain
        self.base_score = base_score

    def fit(self, X, y):
        X = check_array(X, ensure_all_finite="allow-nan")
        self.ensemble_ = fit_gbdt(
            X,
            y,
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            learning_rate=self.learning_rate,
            reg_lambda=self.reg_lambda,
            min_child_weight=self.min_child_weight,
            min_split_gain=self.min_split_gain,
            base_score=self.base_score,
        )
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "ensemble_")
        X = check_array(X, ensure_all_finite="allow-nan")
        p = expit(gbdt_margin(self.ensemble_, X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def apply(self, X):
        check_is_fitted(self, "ensemble_")
        return leaf_indices(self.ensemble_, check_array(X, ensure_all_finite="allow-nan"))

    def transform(self, X):
        """Multi-hot cross features as a CSR matrix of width ``total_leaves``."""
        check_is_fitted(self, "ensemble_")
        return encode_multihot(self.ensemble_, check_array(X, ensure_all_finite="allow-nan")).to_csr()
