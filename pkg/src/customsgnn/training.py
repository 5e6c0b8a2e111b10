"""Pretraining, dual-task fine-tuning and the end-to-end pipeline."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import yaml
from sklearn.base import BaseEstimator, ClassifierMixin

from . import gnn
from .data import TEST, TRAIN, VALID, DataError, Dataset, compute_osr, mask_labels, temporal_split
from .evaluation import DEFAULT_PERCENTS, RANKING_KEYS, EvalReport, budget, evaluate, scored_frame
from .gbdt import TreeEnsemble, encode_multihot, fit_gbdt, gbdt_score, transaction_features
from .graph import DEFAULT_KEYS, TransactionGraph, Variant, build_graph, sample_batch

log = logging.getLogger(__name__)

VARIANTS = ("full", "semi", "joint", "only", "sparse")
GRAPH_GRID = [(q, f) for f in ("labeled", "full") for q in ("labeled", "unlabeled", "full")]


class TrainingError(RuntimeError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 20
    finetune_epochs: int = 50
    batch_size: int = 512
    learning_rate: float = 0.005
    # pretraining step size; None reuses learning_rate
    pretrain_learning_rate: Optional[float] = None
    alpha: float = 10.0
    lambda_reg: float = 1e-4
    negatives_R: int = 5
    fanouts: tuple = (25, 10)
    hidden: int = 32
    aggregator: str = "attention"
    seed: int = 0
    pretrain_graph: str = "full"
    finetune_graph: str = "full"
    ranking_key: str = "cls"
    variant: str = "full"
    sparse_drop: str = "hs_code"
    dense_keys: bool = False
    n_trees: int = 100
    max_depth: int = 4
    gbdt_learning_rate: float = 0.3
    patience: int = 5
    lookahead_steps: int = 6
    lookahead_alpha: float = 0.5
    eval_percents: tuple = DEFAULT_PERCENTS
    # dataset preparation, used by prepare_dataset
    test_from: Optional[str] = None
    valid_fraction: float = 0.2
    inspection_rate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(t) for t in self.fanouts))
        object.__setattr__(self, "eval_percents", tuple(float(n) for n in self.eval_percents))
        for name in ("batch_size", "negatives_R", "hidden", "n_trees", "max_depth", "patience"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_epochs", "finetune_epochs", "lookahead_steps"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.fanouts or min(self.fanouts) <= 0:
            raise ValueError("fanouts must be a nonempty list of positive counts")
        if self.alpha < 0 or self.lambda_reg < 0:
            raise ValueError("alpha and lambda_reg must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.pretrain_learning_rate is not None and not self.pretrain_learning_rate > 0:
            raise ValueError("pretrain_learning_rate must be positive")
        if not 0 <= self.lookahead_alpha <= 1:
            raise ValueError("lookahead_alpha must be in [0, 1]")
        if self.aggregator not in gnn.AGGREGATORS:
            raise ValueError(f"aggregator must be one of {gnn.AGGREGATORS}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.ranking_key not in RANKING_KEYS:
            raise ValueError(f"ranking_key must be one of {RANKING_KEYS}")
        for name in ("pretrain_graph", "finetune_graph"):
            object.__setattr__(self, name, Variant.parse(getattr(self, name)).value)
        if self.sparse_drop not in DEFAULT_KEYS:
            raise ValueError(f"sparse_drop must be one of {DEFAULT_KEYS}")
        if any(not 0 < n <= 1 for n in self.eval_percents):
            raise ValueError("eval_percents must be fractions in (0, 1]")
        if self.inspection_rate is not None and not 0 < self.inspection_rate <= 1:
            raise ValueError("inspection_rate must be in (0, 1]")

    @property
    def n_layers(self) -> int:
        return len(self.fanouts)

    @property
    def keys(self) -> tuple:
        keys = list(DEFAULT_KEYS)
        if self.dense_keys:
            keys.append("importer_hs")
        if self.variant == "sparse":
            keys.remove(self.sparse_drop)
        return tuple(keys)

    def replace(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["fanouts"] = list(self.fanouts)
        out["eval_percents"] = list(self.eval_percents)
        return out

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        values = dict(values)
        if values.get("test_from") is not None:
            values["test_from"] = str(values["test_from"])
        return cls(**values)

    @classmethod
    def from_yaml(cls, path) -> "TrainConfig":
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: expected a mapping at top level")
        return cls.from_dict(doc.get("train", doc))


def _subseed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """Adam moments plus an optional lookahead slow-weight copy."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sync_every: int = 6  # 0 disables lookahead
    sync_alpha: float = 0.5
    slow: dict = field(default_factory=dict)

    @classmethod
    def create(cls, params: gnn.ModelParams, sync_every: int = 6, sync_alpha: float = 0.5) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        slow = {k: v.copy() for k, v in params.tensors.items()} if sync_every else {}
        return cls({k: z.copy() for k, z in zeros.items()}, zeros, sync_every=sync_every, sync_alpha=sync_alpha, slow=slow)


def optimizer_step(state: OptimizerState, params: gnn.ModelParams, grads: dict, lr: float) -> gnn.ModelParams:
    """One bias-corrected adaptive-moment update, in place; tensors without a gradient are left alone."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.step + 1} in {', '.join(sorted(bad))}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if state.sync_every and t % state.sync_every == 0:
        for name, slow in state.slow.items():
            slow += state.sync_alpha * (params.tensors[name] - slow)
            params.tensors[name][...] = slow
    return params


# ---------------------------------------------------------------------------
# losses


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _pair_loss(s: np.ndarray, a: np.ndarray, b: np.ndarray, coef: np.ndarray, sign: np.ndarray):
    """sum_i -coef_i log sigmoid(sign_i s_a_i . s_b_i) and its gradient with respect to s."""
    x = np.einsum("ij,ij->i", s[a], s[b])
    loss = float(-(coef * log_sigmoid(sign * x)).sum())
    # d/dx of -log sigmoid(sign x) = -sign * sigmoid(-sign x)
    dx = -coef * sign * np.exp(log_sigmoid(-sign * x))
    ds = np.zeros_like(s)
    np.add.at(ds, a, dx[:, None] * s[b])
    np.add.at(ds, b, dx[:, None] * s[a])
    return loss, ds


def pretrain_loss(s_u, s_pos, s_neg):
    """Negative-sampling loss of one anchor.

    ``-mean_v log sigmoid(s_u.s_v) - (1/R) sum_n log sigmoid(-s_u.s_n)``.
    Returns ``(loss, d_u, d_pos, d_neg)``.
    """
    s_u = np.asarray(s_u, dtype=float)
    s_pos = np.atleast_2d(np.asarray(s_pos, dtype=float))
    s_neg = np.asarray(s_neg, dtype=float).reshape(-1, len(s_u))
    if len(s_pos) == 0:
        raise ValueError("anchor has no neighbours")
    p, r = len(s_pos), len(s_neg)
    s = np.vstack([s_u[None], s_pos, s_neg])
    a = np.zeros(p + r, dtype=np.int64)
    b = np.arange(1, p + r + 1)
    coef = np.concatenate([np.full(p, 1.0 / p), np.full(r, 1.0 / max(r, 1))])
    sign = np.concatenate([np.ones(p), -np.ones(r)])
    loss, ds = _pair_loss(s, a, b, coef, sign)
    return loss, ds[0], ds[1 : p + 1], ds[p + 1 :]


def _bce_terms(logit: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy from logits and its gradient per logit."""
    n = len(y)
    # per-class softplus stays finite when a probability is exactly 0 or 1
    with np.errstate(invalid="ignore"):
        terms = np.where(y > 0.5, np.logaddexp(0.0, -logit), np.logaddexp(0.0, logit))
    loss = float(np.mean(terms))
    p = np.exp(log_sigmoid(logit))
    return loss, (p - y) / n


def finetune_loss(y_cls_hat, y_cls, y_rev_hat, y_rev, params: Optional[gnn.ModelParams], alpha: float, lam: float):
    """Dual-task loss ``BCE + alpha * MSE + lam * ||theta||^2``.

    Returns ``(loss, d_logit, d_rev, d_params)`` where ``d_logit`` is the
    gradient with respect to the classification logit.
    """
    p = np.asarray(y_cls_hat, dtype=float)
    y = np.asarray(y_cls, dtype=float)
    if len(p) == 0:
        raise ValueError("empty labeled batch")
    with np.errstate(divide="ignore"):
        logit = np.log(p) - np.log1p(-p)
    return _finetune_from_logit(logit, y, np.asarray(y_rev_hat, float), np.asarray(y_rev, float), params, alpha, lam)


def _finetune_from_logit(logit, y, rev_hat, rev, params, alpha, lam):
    n = len(y)
    bce, d_logit = _bce_terms(logit, y)
    err = rev_hat - rev
    mse = float(np.mean(err * err))
    d_rev = 2.0 * alpha * err / n
    loss = bce + alpha * mse
    d_params = {}
    if params is not None and lam:
        loss += lam * params.l2()
        d_params = {k: 2.0 * lam * v for k, v in params.tensors.items()}
    return loss, d_logit, d_rev, d_params


def heads(params: gnn.ModelParams, s):
    return gnn.heads(params, s)


def _add(into: dict, more: dict, scale: float = 1.0) -> dict:
    for k, v in more.items():
        into[k] = into[k] + scale * v if k in into else scale * v
    return into


# ---------------------------------------------------------------------------
# negative sampling and pretraining batches


def _is_neighbor(g: TransactionGraph, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Whether each (a, b) pair, one transaction and one virtual node, is an edge."""
    txn = np.where(g.is_txn(a), a, b)
    virt = np.where(g.is_txn(a), b, a)
    slot = g.block_of(virt) - 1
    return g.indices[g.indptr[txn] + slot] == virt


def _pool_range(g: TransactionGraph, anchor: int) -> tuple[int, int]:
    return (g.n_txn, g.n_nodes) if anchor < g.n_txn else (0, g.n_txn)


def sample_negatives(g: TransactionGraph, anchor: int, R: int, seed: int) -> np.ndarray:
    """R distinct nodes of the anchor's neighbour kind that are not its neighbours."""
    if R == 0:
        return np.zeros(0, dtype=np.int64)
    lo, hi = _pool_range(g, anchor)
    nbrs = g.indices[g.indptr[anchor] : g.indptr[anchor + 1]]
    pool = np.setdiff1d(np.arange(lo, hi), nbrs)
    if len(pool) < R:
        raise TrainingError(f"negative pool of node {anchor} has {len(pool)} nodes, need {R}")
    return np.sort(np.random.default_rng(seed).choice(pool, R, replace=False))


def _batch_negatives(g: TransactionGraph, anchors: np.ndarray, R: int, seed: int) -> np.ndarray:
    """(n, R) negatives by rejection sampling, with the exact draw as fallback."""
    n = len(anchors)
    out = np.full((n, R), -1, dtype=np.int64)
    if R == 0:
        return out
    rng = np.random.default_rng(seed)
    txn = g.is_txn(anchors)
    lo = np.where(txn, g.n_txn, 0)
    span = np.where(txn, g.n_nodes - g.n_txn, g.n_txn)
    cand = lo[:, None] + np.floor(rng.random((n, 3 * R)) * span[:, None]).astype(np.int64)
    filled = np.zeros(n, dtype=np.int64)
    for j in range(cand.shape[1]):
        c = cand[:, j]
        ok = (filled < R) & ~_is_neighbor(g, anchors, c) & ~(out == c[:, None]).any(axis=1)
        rows = np.flatnonzero(ok)
        out[rows, filled[rows]] = c[rows]
        filled[rows] += 1
    for i in np.flatnonzero(filled < R):
        out[i] = sample_negatives(g, int(anchors[i]), R, _subseed(seed, i))
    return out


@dataclass
class PretrainBatch:
    anchors: np.ndarray
    pos_anchor: np.ndarray  # index into anchors
    pos_node: np.ndarray
    neg_node: np.ndarray  # (n_anchors, R)


def make_pretrain_batch(g: TransactionGraph, anchors: np.ndarray, fanout: int, R: int, seed: int) -> PretrainBatch:
    """Positives are the anchor's sampled first-hop neighbours."""
    anchors = np.asarray(anchors, dtype=np.int64)
    hop = sample_batch(g, anchors, [fanout], _subseed(seed, 1))
    return PretrainBatch(anchors, hop.parents[1], hop.nodes[1], _batch_negatives(g, anchors, R, _subseed(seed, 2)))


def pretrain_objective(params: gnn.ModelParams, g: TransactionGraph, batch: PretrainBatch, fanouts, seed: int):
    """Mean negative-sampling loss over the batch anchors and its parameter gradients."""
    n, R = batch.neg_node.shape
    nodes = np.concatenate([batch.anchors, batch.pos_node, batch.neg_node.ravel()])
    roots, inv = np.unique(nodes, return_inverse=True)
    trace = gnn.forward(params, g, sample_batch(g, roots, fanouts, seed))
    a_idx = inv[:n]
    p_idx = inv[n : n + len(batch.pos_node)]
    n_idx = inv[n + len(batch.pos_node) :]
    n_pos = np.bincount(batch.pos_anchor, minlength=n)
    if (n_pos == 0).any():
        raise TrainingError("isolated anchor in pretraining batch")
    a = np.concatenate([a_idx[batch.pos_anchor], np.repeat(a_idx, R)])
    b = np.concatenate([p_idx, n_idx])
    coef = np.concatenate([1.0 / n_pos[batch.pos_anchor], np.full(n * R, 1.0 / R)]) / n
    sign = np.concatenate([np.ones(len(p_idx)), -np.ones(n * R)])
    loss, ds = _pair_loss(trace.output, a, b, coef, sign)
    return loss, gnn.backward(params, trace, ds)


def finetune_objective(params: gnn.ModelParams, g: TransactionGraph, roots, y, y_rev, alpha, lam, fanouts, seed: int):
    """Dual-task loss on labeled roots and gradients for every tensor, heads included."""
    roots = np.asarray(roots, dtype=np.int64)
    trace = gnn.forward(params, g, sample_batch(g, roots, fanouts, seed))
    s = trace.output
    t = params.tensors
    logit = s @ t["cls.r"] + t["cls.b"][0]
    rev_hat = s @ t["rev.r"] + t["rev.b"][0]
    loss, d_logit, d_rev, d_params = _finetune_from_logit(logit, np.asarray(y, float), rev_hat, np.asarray(y_rev, float), params, alpha, lam)
    ds = np.outer(d_logit, t["cls.r"]) + np.outer(d_rev, t["rev.r"])
    grads = gnn.backward(params, trace, ds)
    grads.update({"cls.r": s.T @ d_logit, "cls.b": np.array([d_logit.sum()]), "rev.r": s.T @ d_rev, "rev.b": np.array([d_rev.sum()])})
    return loss, _add(grads, d_params)


# ---------------------------------------------------------------------------
# fitted model


class GraphFCModel:
    """A trained model: GNN tensors plus everything needed to featurize and score.

    All state lives in ``params.meta`` so a checkpoint alone restores it.
    """

    def __init__(self, params: gnn.ModelParams):
        self.params = params
        meta = params.meta
        self.config = TrainConfig.from_dict(meta["config"])
        self.ensemble = TreeEnsemble.from_json(meta["gbdt"]) if meta.get("gbdt") else None
        self.rev_mean = float(meta["rev_mean"])
        self.rev_std = float(meta["rev_std"])
        self.scaler = None if meta.get("scaler") is None else (np.asarray(meta["scaler"][0]), np.asarray(meta["scaler"][1]))

    @classmethod
    def load(cls, path) -> "GraphFCModel":
        params = gnn.load_checkpoint(path)
        for k in ("config", "rev_mean", "rev_std"):
            if k not in params.meta:
                raise gnn.CheckpointError(f"checkpoint lacks {k!r}")
        return cls(params)

    def save(self, path) -> None:
        gnn.save_checkpoint(self.params, path)

    def features(self, d: Dataset):
        return _features(d, self.ensemble, self.scaler)

    def _query_graph(self, d: Dataset, query: np.ndarray):
        split = d.split
        if not (split == TRAIN).any():
            raise DataError("scoring needs the training split for graph context")
        include = (split == TRAIN) | query
        sub = d.where(include)
        feats = self.features(d)[np.flatnonzero(include)]
        g = build_graph(sub, feats, self.config.finetune_graph, self.config.keys, always_include=query[include])
        # graph rows index ``sub``; positions of the query rows in d order
        node_of_row = np.full(len(sub), -1, dtype=np.int64)
        node_of_row[g.rows] = np.arange(g.n_txn)
        roots = node_of_row[query[include]]
        train_end = int(d.dates[split == TRAIN].max().astype(np.int64))
        return g, roots, train_end

    def embed(self, d: Dataset, query: np.ndarray) -> np.ndarray:
        """Final embeddings of the ``query`` rows of ``d`` (a boolean mask), in row order."""
        query = np.asarray(query, dtype=bool)
        if not query.any():
            raise DataError("no rows to embed")
        g, roots, cutoff = self._query_graph(d, query)
        seed = _subseed(self.config.seed, 99)
        return gnn.embed(self.params, g, roots, self.config.fanouts, seed, history_cutoff=cutoff, batch_size=self.config.batch_size)

    def score(self, d: Dataset, query: np.ndarray):
        """(fraud probability, raised-revenue estimate) for the ``query`` rows of ``d``."""
        p, r = gnn.heads(self.params, self.embed(d, query))
        rev = np.expm1(r * self.rev_std + self.rev_mean)
        return p, rev


def _features(d: Dataset, ensemble: Optional[TreeEnsemble], scaler):
    if ensemble is not None:
        return encode_multihot(ensemble, d).to_csr()
    mean, std = scaler
    return sp.csr_matrix((transaction_features(d) - mean) / std)


# ---------------------------------------------------------------------------
# pipeline


def prepare_dataset(cfg: TrainConfig, d: Dataset) -> Dataset:
    """Apply the configured temporal split and label mask, when set."""
    if cfg.test_from is not None:
        d = temporal_split(d, cfg.test_from, cfg.valid_fraction)
    if cfg.inspection_rate is not None:
        d = mask_labels(d, cfg.inspection_rate, cfg.seed)
    return d


def _check_prepared(d: Dataset) -> None:
    split = d.split
    for name in (TRAIN, VALID, TEST):
        if not (split == name).any():
            raise DataError(f"dataset has no {name} records; split it first")
    lab = (split == TRAIN) & d.labeled
    y = d.illicit[lab]
    if len(y) < 2 or y.min() == y.max():
        raise DataError("labeled train records must contain both classes")


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:
                raise PipelineError(name, exc) from exc

        return inner

    return wrap


class _Run:
    def __init__(self, cfg: TrainConfig, d: Dataset):
        self.cfg = cfg
        self.d = d
        self.history = {"pretrain_loss": [], "finetune_loss": [], "valid_rec5": [], "pretrain_diverged": False}

    @_stage("gbdt")
    def fit_features(self):
        cfg, d = self.cfg, self.d
        lab = (d.split == TRAIN) & d.labeled
        X = transaction_features(d)
        self.ensemble, self.scaler = None, None
        if cfg.variant == "only":
            mean, std = X[lab].mean(axis=0), X[lab].std(axis=0)
            self.scaler = (mean, np.where(std > 0, std, 1.0))
        else:
            self.ensemble = fit_gbdt(X[lab], d.illicit[lab], cfg.n_trees, cfg.max_depth, cfg.gbdt_learning_rate)
        self.features = _features(d, self.ensemble, self.scaler)
        rev = np.log1p(d.raised_revenue[lab])
        self.rev_mean = float(rev.mean())
        std = float(rev.std())
        self.rev_std = std if std > 0 else 1.0

    def _train_graph(self, variant, always_include=None):
        d = self.d
        train = d.split == TRAIN
        sub = d.where(train)
        extra = None if always_include is None else always_include[train]
        return build_graph(sub, self.features[np.flatnonzero(train)], variant, self.cfg.keys, always_include=extra)

    def init_params(self):
        cfg = self.cfg
        self.params = gnn.init_params(self.features.shape[1], cfg.hidden, cfg.n_layers, cfg.aggregator, len(cfg.keys), seed=_subseed(cfg.seed, 10))
        self.opt = OptimizerState.create(self.params, cfg.lookahead_steps, cfg.lookahead_alpha)

    def _anchor_batches(self, g: TransactionGraph, stage: int, epoch: int):
        order = np.random.default_rng(_subseed(self.cfg.seed, stage, epoch)).permutation(g.n_nodes)
        bs = self.cfg.batch_size
        return [order[i : i + bs] for i in range(0, len(order), bs)]

    def _pretrain_grads(self, g, anchors, stage, epoch, b):
        cfg = self.cfg
        seed = _subseed(cfg.seed, stage, epoch, b)
        batch = make_pretrain_batch(g, anchors, cfg.fanouts[0], cfg.negatives_R, seed)
        return pretrain_objective(self.params, g, batch, cfg.fanouts, _subseed(seed, 3))

    @_stage("pretrain")
    def pretrain(self):
        cfg = self.cfg
        if cfg.variant in ("semi", "joint") or cfg.pretrain_epochs == 0:
            return
        g = self._train_graph(cfg.pretrain_graph)
        lr = cfg.learning_rate if cfg.pretrain_learning_rate is None else cfg.pretrain_learning_rate
        losses = self.history["pretrain_loss"]
        for epoch in range(cfg.pretrain_epochs):
            total = 0.0
            batches = self._anchor_batches(g, 20, epoch)
            for b, anchors in enumerate(batches):
                loss, grads = self._pretrain_grads(g, anchors, 21, epoch, b)
                optimizer_step(self.opt, self.params, grads, lr)
                total += loss * len(anchors)
            losses.append(total / g.n_nodes)
            log.info("pretrain epoch %d loss %.5f", epoch + 1, losses[-1])
            if epoch < 5 and epoch > 0 and losses[-1] > losses[-2]:
                self.history["pretrain_diverged"] = True
                log.warning("pretraining loss rose at epoch %d", epoch + 1)

    def _valid_recall(self, model: GraphFCModel, vg, vroots, vcut, y) -> float:
        s = gnn.embed(self.params, vg, vroots, self.cfg.fanouts, _subseed(self.cfg.seed, 99), vcut, self.cfg.batch_size)
        p, _ = gnn.heads(self.params, s)
        k = budget(0.05, len(p))
        top = np.lexsort((self.d.txn_ids[self.d.split == VALID].astype(str), -p))[:k]
        return float(y[top].sum() / max(y.sum(), 1))

    @_stage("finetune")
    def finetune(self):
        cfg, d = self.cfg, self.d
        train = d.split == TRAIN
        lab = train & d.labeled
        g = self._train_graph(cfg.finetune_graph, always_include=lab)
        labeled_nodes = np.flatnonzero(lab[train][g.rows])
        rows = np.flatnonzero(train)[g.rows[labeled_nodes]]
        y = d.illicit[rows]
        y_rev = (np.log1p(d.raised_revenue[rows]) - self.rev_mean) / self.rev_std
        pos_rate = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self.params.tensors.update(gnn.init_heads(cfg.hidden, _subseed(cfg.seed, 11), np.log(pos_rate / (1 - pos_rate))))
        self.opt = OptimizerState.create(self.params, cfg.lookahead_steps, cfg.lookahead_alpha)
        joint_graph = self._train_graph(cfg.pretrain_graph) if cfg.variant == "joint" else None

        model = self._model()
        valid = d.split == VALID
        vg, vroots, vcut = model._query_graph(d, valid)
        vy = d.illicit[valid]
        best, best_params, stale = -1.0, self.params.copy(), 0
        bs = cfg.batch_size
        for epoch in range(cfg.finetune_epochs):
            order = np.random.default_rng(_subseed(cfg.seed, 30, epoch)).permutation(len(labeled_nodes))
            total = 0.0
            for b, start in enumerate(range(0, len(order), bs)):
                idx = order[start : start + bs]
                seed = _subseed(cfg.seed, 31, epoch, b)
                loss, grads = finetune_objective(self.params, g, labeled_nodes[idx], y[idx], y_rev[idx], cfg.alpha, cfg.lambda_reg, cfg.fanouts, seed)
                if joint_graph is not None:
                    anchors = np.random.default_rng(_subseed(seed, 4)).choice(joint_graph.n_nodes, min(bs, joint_graph.n_nodes), replace=False)
                    p_loss, p_grads = self._pretrain_grads(joint_graph, anchors, 32, epoch, b)
                    loss += p_loss
                    _add(grads, p_grads)
                optimizer_step(self.opt, self.params, grads, cfg.learning_rate)
                total += loss * len(idx)
            self.history["finetune_loss"].append(total / len(order))
            rec = self._valid_recall(model, vg, vroots, vcut, vy)
            self.history["valid_rec5"].append(rec)
            log.info("finetune epoch %d loss %.5f valid Rec@5%% %.4f", epoch + 1, self.history["finetune_loss"][-1], rec)
            if rec > best:
                best, best_params, stale = rec, self.params.copy(), 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        self.params = best_params
        self.history["best_valid_rec5"] = best

    def _model(self) -> GraphFCModel:
        self.params.meta = {
            "config": self.cfg.to_dict(),
            "gbdt": None if self.ensemble is None else self.ensemble.to_json(),
            "rev_mean": self.rev_mean,
            "rev_std": self.rev_std,
            "scaler": None if self.scaler is None else [self.scaler[0].tolist(), self.scaler[1].tolist()],
        }
        return GraphFCModel(self.params)

    @_stage("evaluate")
    def report(self) -> EvalReport:
        cfg, d = self.cfg, self.d
        model = self._model()
        self.params.meta["history"] = self.history
        test = d.split == TEST
        cls, rev = model.score(d, test)
        rep = evaluate(scored_frame(d.where(test), cls, rev), cfg.eval_percents, cfg.ranking_key, variant_name(cfg), cfg.seed)
        rep.config_digest = cfg.digest()
        rep.osr = osr_block(d)
        return rep


def variant_name(cfg: TrainConfig) -> str:
    name = "graphfc" if cfg.variant == "full" else f"graphfc_{cfg.variant}"
    if (cfg.pretrain_graph, cfg.finetune_graph) != ("full", "full"):
        name += f"[Q={cfg.pretrain_graph},F={cfg.finetune_graph}]"
    if cfg.aggregator != "attention":
        name += f"[{cfg.aggregator}]"
    return name


def osr_block(d: Dataset) -> dict:
    train, test = d.in_split(TRAIN), d.in_split(TEST)
    out = {}
    for key in DEFAULT_KEYS:
        s = compute_osr(train, test, key)
        out[key] = {"seen": s.seen_count, "unseen": s.unseen_count, "osr": s.osr}
    return out


def run_pipeline(cfg: TrainConfig, d: Dataset):
    """GBDT cross features, pretraining, fine-tuning, then a test-split report.

    ``d`` must carry train/valid/test splits and a label mask.  Returns
    ``(params, report)``; ``params.meta`` holds everything needed to rebuild
    a :class:`GraphFCModel`.
    """
    start = time.perf_counter()
    _check_prepared(d)
    run = _Run(cfg, d)
    run.fit_features()
    run.init_params()
    run.pretrain()
    run.finetune()
    rep = run.report()
    rep.runtime = time.perf_counter() - start
    return run.params, rep


def run_baseline(cfg: TrainConfig, d: Dataset, query: Optional[np.ndarray] = None) -> EvalReport:
    """GBDT fraud scores alone on the test split (or on ``query`` rows)."""
    _check_prepared(d)
    split = d.split
    lab = (split == TRAIN) & d.labeled
    X = transaction_features(d)
    e = fit_gbdt(X[lab], d.illicit[lab], cfg.n_trees, cfg.max_depth, cfg.gbdt_learning_rate)
    query = split == TEST if query is None else np.asarray(query, dtype=bool)
    p = gbdt_score(e, X[query])
    rep = evaluate(scored_frame(d.where(query), p, np.zeros(len(p))), cfg.eval_percents, "cls", "gbdt", cfg.seed)
    rep.config_digest = cfg.digest()
    rep.osr = osr_block(d)
    return rep


# ---------------------------------------------------------------------------
# estimator interface


class GraphFC(ClassifierMixin, BaseEstimator):
    """Estimator form of the pipeline; ``X`` is a split and masked :class:`Dataset`.

    ``fit`` trains on the labeled train rows (validation rows drive early
    stopping); ``predict_proba`` scores any rows of a dataset that carries
    the same training split.
    """

    def __init__(
        self,
        pretrain_epochs=20,
        finetune_epochs=50,
        batch_size=512,
        learning_rate=0.005,
        pretrain_learning_rate=None,
        alpha=10.0,
        lambda_reg=1e-4,
        negatives_R=5,
        fanouts=(25, 10),
        hidden=32,
        aggregator="attention",
        variant="full",
        pretrain_graph="full",
        finetune_graph="full",
        seed=0,
    ):
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.pretrain_learning_rate = pretrain_learning_rate
        self.alpha = alpha
        self.lambda_reg = lambda_reg
        self.negatives_R = negatives_R
        self.fanouts = fanouts
        self.hidden = hidden
        self.aggregator = aggregator
        self.variant = variant
        self.pretrain_graph = pretrain_graph
        self.finetune_graph = finetune_graph
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise TypeError("GraphFC.fit expects a Dataset")
        params, report = run_pipeline(self._config(), X)
        self.model_ = GraphFCModel(params)
        self.report_ = report
        self.classes_ = np.array([0, 1])
        return self

    def _query(self, X: Dataset, rows):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("GraphFC is not fitted")
        if rows is None:
            return np.ones(len(X), dtype=bool)
        mask = np.zeros(len(X), dtype=bool)
        mask[rows] = True
        return mask

    def predict_proba(self, X: Dataset, rows: Optional[Sequence[int]] = None):
        p, _ = self.model_.score(X, self._query(X, rows))
        return np.column_stack([1 - p, p])

    def predict_revenue(self, X: Dataset, rows: Optional[Sequence[int]] = None):
        return self.model_.score(X, self._query(X, rows))[1]

    def predict(self, X: Dataset, rows: Optional[Sequence[int]] = None):
        return (self.predict_proba(X, rows)[:, 1] >= 0.5).astype(int)
