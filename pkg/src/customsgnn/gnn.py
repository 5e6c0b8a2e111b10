"""Attention message passing over sampled transaction subgraphs, with exact gradients.

Layer ``k`` updates every node that later layers still need::

    s_m^(k) = ReLU( sum_{j in pool(m)} alpha_mj W2^(k) s_j^(k-1) )

The pool always contains ``m`` itself.  Sampled children join the pool only
when ``m`` is of the kind being refreshed at that layer: virtual nodes at odd
layers, transactions at even layers.  Virtual nodes therefore collect from
transactions before any transaction reads from them.

Aggregators:

* ``attention``  alpha_mj = softmax_j LeakyReLU(r . [W1 s_j || W1 s_m])
* ``mean``       alpha_mj = 1 / |pool(m)|
* ``relation``   mean weights with a separate W2 per edge relation
                 (self, then one per key column)
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .graph import SampledSubgraph, TransactionGraph

AGGREGATORS = ("attention", "mean", "relation")
LEAKY_SLOPE = 0.2
CHECKPOINT_MAGIC = b"CGNNCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class LayerParams:
    W1: np.ndarray  # (d_out, d_in)
    W2: np.ndarray  # (d_out, d_in), or (n_relations, d_out, d_in) for the relation aggregator
    r: np.ndarray  # (2 * d_out,)
    leaky_slope: float = LEAKY_SLOPE

    @property
    def d_out(self) -> int:
        return self.W1.shape[0]


@dataclass
class ModelParams:
    """All learnable tensors, keyed by name (``layer{k}.W1``, ``cls.r``, ...)."""

    tensors: dict
    aggregator: str = "attention"
    leaky_slope: float = LEAKY_SLOPE
    meta: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self.tensors if k.endswith(".W1"))

    @property
    def hidden(self) -> int:
        return self.tensors["cls.r"].shape[0]

    @property
    def input_width(self) -> int:
        return self.tensors["layer0.W1"].shape[1]

    def layer(self, k: int) -> LayerParams:
        t = self.tensors
        return LayerParams(t[f"layer{k}.W1"], t[f"layer{k}.W2"], t[f"layer{k}.r"], self.leaky_slope)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.aggregator, self.leaky_slope, dict(self.meta))

    def l2(self) -> float:
        return float(sum(np.sum(v * v) for v in self.tensors.values()))

    def names(self) -> list:
        return list(self.tensors)


def init_params(
    input_width: int,
    hidden: int = 32,
    n_layers: int = 2,
    aggregator: str = "attention",
    n_keys: int = 2,
    seed: int = 0,
    leaky_slope: float = LEAKY_SLOPE,
) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    if aggregator not in AGGREGATORS:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}")
    rng = np.random.default_rng(seed)

    def glorot(shape):
        fan_out, fan_in = shape[-2], shape[-1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, shape)

    tensors = {}
    d_in = input_width
    for k in range(n_layers):
        tensors[f"layer{k}.W1"] = glorot((hidden, d_in))
        w2_shape = (n_keys + 1, hidden, d_in) if aggregator == "relation" else (hidden, d_in)
        tensors[f"layer{k}.W2"] = glorot(w2_shape)
        tensors[f"layer{k}.r"] = glorot((1, 2 * hidden))[0]
        d_in = hidden
    tensors.update(init_heads(hidden, seed=seed + 1))
    return ModelParams(tensors, aggregator, leaky_slope)


def init_heads(hidden: int, seed: int = 0, cls_bias: float = 0.0) -> dict:
    rng = np.random.default_rng(seed)
    limit = np.sqrt(6.0 / (hidden + 1))
    return {
        "cls.r": rng.uniform(-limit, limit, hidden),
        "cls.b": np.array([cls_bias]),
        "rev.r": rng.uniform(-limit, limit, hidden),
        "rev.b": np.array([0.0]),
    }


# ---------------------------------------------------------------------------
# single-node reference forms


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def attention_scores(layer: LayerParams, target, pool) -> np.ndarray:
    """Attention weights of ``target`` over the rows of ``pool``.

    The caller decides the pool; in the model it is the sampled neighbours
    plus the target itself.
    """
    target = np.asarray(target, dtype=float)
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    if len(pool) == 0:
        raise ValueError("attention pool is empty")
    if pool.shape[1] != layer.W1.shape[1] or target.shape != (layer.W1.shape[1],):
        raise ValueError("shape mismatch between inputs and W1")
    if not (np.isfinite(pool).all() and np.isfinite(target).all()):
        raise ValueError("non-finite inputs")
    d = layer.d_out
    logits = leaky_relu(pool @ layer.W1.T @ layer.r[:d] + layer.W1 @ target @ layer.r[d:], layer.leaky_slope)
    w = np.exp(logits - logits.max())
    return w / w.sum()


# ---------------------------------------------------------------------------
# batched computation


class SparseRows:
    """Rows of a sparse matrix addressed through an index (-1 = zero row)."""

    def __init__(self, matrix: sp.csr_matrix, index: np.ndarray):
        self.matrix = matrix
        self.index = index

    def __len__(self):
        return len(self.index)

    def project(self, W: np.ndarray) -> np.ndarray:
        """Rows times ``W.T``."""
        out = np.zeros((len(self.index), W.shape[0]))
        hit = self.index >= 0
        if hit.any():
            out[hit] = (self.matrix @ W.T)[self.index[hit]]
        return out

    def weight_grad(self, d_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(project(W) * d_out)`` with respect to W."""
        hit = self.index >= 0
        acc = scatter_add(self.index[hit], d_out[hit], self.matrix.shape[0])
        return np.asarray((self.matrix.T @ acc).T)


def scatter_add(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """out[i] = sum of values[j] with index[j] == i."""
    m = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n, len(index)))
    return np.asarray(m @ values)


def _project(states, W):
    return states.project(W) if isinstance(states, SparseRows) else states @ W.T


def _weight_grad(states, d_out):
    return states.weight_grad(d_out) if isinstance(states, SparseRows) else d_out.T @ states


@dataclass
class PoolEdges:
    """Message edges of one layer, sorted by destination; ``src``/``dst`` are local row indices."""

    dst: np.ndarray
    src: np.ndarray
    relation: np.ndarray  # 0 = self, b >= 1 = key block b
    n_dst: int
    n_src: int

    @property
    def starts(self) -> np.ndarray:
        return np.searchsorted(self.dst, np.arange(self.n_dst))

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_dst)

    @property
    def self_src(self) -> np.ndarray:
        """Source row of each destination's self edge."""
        return self.src[self.relation == 0]


def _blocks(layer: LayerParams, aggregator: str) -> list:
    """Weight matrices applied to the layer input: the W2 block(s), then W1 for attention."""
    blocks = list(layer.W2) if aggregator == "relation" else [layer.W2]
    if aggregator == "attention":
        blocks.append(layer.W1)
    return blocks


def aggregate_layer(layer: LayerParams, states, edges: PoolEdges, aggregator: str = "attention"):
    """One propagation step.  Returns ``(new_states, cache)`` for :func:`aggregate_layer_backward`."""
    d = layer.d_out
    # one pass over the (possibly sparse) input for every weight block
    P = _project(states, np.vstack(_blocks(layer, aggregator)))
    cache = {"edges": edges, "states": states, "P": P}
    if aggregator == "attention":
        Z = P[:, d:]
        a_src, a_dst = Z @ layer.r[:d], Z @ layer.r[d:]
        raw = a_src[edges.src] + a_dst[edges.self_src][edges.dst]
        logits = leaky_relu(raw, layer.leaky_slope)
        starts = edges.starts
        peak = np.maximum.reduceat(logits, starts)
        w = np.exp(logits - peak[edges.dst])
        alpha = w / np.add.reduceat(w, starts)[edges.dst]
        cache["raw"] = raw
    else:
        alpha = 1.0 / edges.counts[edges.dst]
    if aggregator == "relation":
        col = edges.relation[:, None] * d + np.arange(d)[None, :]
        msg = P[edges.src[:, None], col]
    else:
        msg = P[edges.src, :d]
    pre = np.add.reduceat(alpha[:, None] * msg, edges.starts, axis=0)
    cache.update(alpha=alpha, msg=msg, pre=pre)
    return np.maximum(pre, 0.0), cache


def aggregate_layer_backward(layer: LayerParams, cache: dict, d_out: np.ndarray, aggregator: str, need_input_grad: bool):
    """Gradients of one layer: ``({"W1","W2","r"}, d_states or None)``."""
    edges: PoolEdges = cache["edges"]
    states, P = cache["states"], cache["P"]
    alpha, msg = cache["alpha"], cache["msg"]
    d = layer.d_out
    d_pre = d_out * (cache["pre"] > 0)
    d_pre_e = d_pre[edges.dst]
    d_msg = alpha[:, None] * d_pre_e
    dP = np.zeros_like(P)
    grads = {"W1": np.zeros_like(layer.W1), "r": np.zeros_like(layer.r)}
    if aggregator == "relation":
        col = edges.relation[:, None] * d + np.arange(d)[None, :]
        np.add.at(dP, (edges.src[:, None], col), d_msg)
    else:
        dP[:, :d] = scatter_add(edges.src, d_msg, edges.n_src)
    if aggregator == "attention":
        Z, raw = P[:, d:], cache["raw"]
        d_alpha = np.einsum("ij,ij->i", d_pre_e, msg)
        starts = edges.starts
        inner = np.add.reduceat(alpha * d_alpha, starts)
        d_logit = alpha * (d_alpha - inner[edges.dst])
        d_raw = d_logit * np.where(raw > 0, 1.0, layer.leaky_slope)
        d_a_src = np.bincount(edges.src, weights=d_raw, minlength=edges.n_src)
        d_a_dst = np.bincount(edges.self_src[edges.dst], weights=d_raw, minlength=edges.n_src)
        grads["r"] = np.concatenate([Z.T @ d_a_src, Z.T @ d_a_dst])
        dP[:, d:] = np.outer(d_a_src, layer.r[:d]) + np.outer(d_a_dst, layer.r[d:])
    dW = _weight_grad(states, dP)
    blocks = _blocks(layer, aggregator)
    if aggregator == "relation":
        grads["W2"] = dW.reshape(layer.W2.shape)
    else:
        grads["W2"] = dW[:d]
    if aggregator == "attention":
        grads["W1"] = dW[d:]
    d_states = dP @ np.vstack(blocks) if need_input_grad else None
    return grads, d_states


@dataclass
class BatchPlan:
    """Which positions each layer updates and the message edges between them."""

    node: np.ndarray  # global node id per position
    layer_rows: list  # layer_rows[k]: positions whose state exists after layer k (k = 0..K)
    edges: list  # edges[k-1]: PoolEdges of layer k
    roots: np.ndarray  # positions of the roots in layer_rows[K] order


def plan_batch(g: TransactionGraph, sub: SampledSubgraph, n_layers: int) -> BatchPlan:
    K = n_layers
    if sub.n_hops < K:
        raise ValueError(f"subgraph has {sub.n_hops} hops, model needs {K}")
    sizes = [len(n) for n in sub.nodes]
    offset = np.concatenate([[0], np.cumsum(sizes)])
    node = np.concatenate(sub.nodes)
    parent = np.concatenate([np.full(sizes[0], -1)] + [sub.parents[h] + offset[h - 1] for h in range(1, len(sizes))])
    is_txn = g.is_txn(node)
    block = g.block_of(node)
    # children grouped by parent position
    child_order = np.argsort(parent, kind="stable")
    child_order = child_order[parent[child_order] >= 0]
    child_ptr = np.searchsorted(parent[child_order], np.arange(len(node) + 1))

    rows = [None] * (K + 1)
    edges = [None] * K
    rows[K] = np.arange(sizes[0])
    for k in range(K, 0, -1):
        dst = rows[k]
        active = ~is_txn[dst] if k % 2 == 1 else is_txn[dst]
        act = dst[active]
        n_child = child_ptr[act + 1] - child_ptr[act]
        child = child_order[np.repeat(child_ptr[act], n_child) + np.arange(n_child.sum()) - np.repeat(np.cumsum(n_child) - n_child, n_child)]
        child_dst = np.repeat(np.flatnonzero(active), n_child)
        e_dst = np.concatenate([np.arange(len(dst)), child_dst])
        e_src_pos = np.concatenate([dst, child])
        rel = np.concatenate([np.zeros(len(dst), dtype=np.int64), np.where(is_txn[dst[child_dst]], block[child], block[dst[child_dst]])])
        src_rows = np.unique(e_src_pos)
        order = np.lexsort((rel != 0, e_dst))  # self edge first within each destination
        edges[k - 1] = PoolEdges(
            dst=e_dst[order],
            src=np.searchsorted(src_rows, e_src_pos[order]),
            relation=rel[order],
            n_dst=len(dst),
            n_src=len(src_rows),
        )
        rows[k - 1] = src_rows
    return BatchPlan(node=node, layer_rows=rows, edges=edges, roots=np.arange(sizes[0]))


@dataclass
class ForwardTrace:
    plan: BatchPlan
    caches: list
    output: np.ndarray  # (n_roots, hidden)


def input_states(g: TransactionGraph, nodes: np.ndarray) -> SparseRows:
    """Layer-0 states: feature rows for transactions, zero rows for virtual nodes."""
    txn = g.is_txn(nodes)
    uniq, inv = np.unique(nodes[txn], return_inverse=True)
    index = np.full(len(nodes), -1, dtype=np.int64)
    index[txn] = inv
    return SparseRows(g.features[uniq], index)


def forward(params: ModelParams, g: TransactionGraph, sub: SampledSubgraph) -> ForwardTrace:
    """Embeddings ``s^(K)`` of the subgraph roots, with the trace needed by :func:`backward`."""
    if g.width != params.input_width:
        raise ValueError(f"graph feature width {g.width} != model input width {params.input_width}")
    plan = plan_batch(g, sub, params.n_layers)
    states = input_states(g, plan.node[plan.layer_rows[0]])
    caches = []
    for k in range(params.n_layers):
        states, cache = aggregate_layer(params.layer(k), states, plan.edges[k], params.aggregator)
        caches.append(cache)
    return ForwardTrace(plan, caches, states)


def backward(params: ModelParams, trace: Optional[ForwardTrace], d_output: np.ndarray) -> dict:
    """Reverse-mode gradients of ``sum(d_output * trace.output)`` for every GNN tensor."""
    if trace is None:
        raise ValueError("backward needs a forward trace")
    if d_output.shape != trace.output.shape:
        raise ValueError("upstream gradient shape does not match the forward output")
    grads = {}
    d = d_output
    for k in range(params.n_layers - 1, -1, -1):
        layer_grads, d = aggregate_layer_backward(params.layer(k), trace.caches[k], d, params.aggregator, need_input_grad=k > 0)
        for name, value in layer_grads.items():
            grads[f"layer{k}.{name}"] = value
    return grads


def heads(params: ModelParams, s: np.ndarray):
    """(fraud probability, revenue prediction) for embedding rows ``s``."""
    t = params.tensors
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != t["cls.r"].shape[0]:
        raise ValueError("embedding width does not match the prediction heads")
    logit = s @ t["cls.r"] + t["cls.b"][0]
    return 1.0 / (1.0 + np.exp(-logit)), s @ t["rev.r"] + t["rev.b"][0]


def embed(params: ModelParams, g: TransactionGraph, roots, fanouts, seed: int, history_cutoff=None, batch_size: int = 1024) -> np.ndarray:
    """Final embeddings for many roots, batch by batch."""
    from .graph import sample_batch

    roots = np.asarray(roots, dtype=np.int64)
    out = np.zeros((len(roots), params.hidden))
    for start in range(0, len(roots), batch_size):
        chunk = roots[start : start + batch_size]
        sub = sample_batch(g, chunk, fanouts, seed, history_cutoff)
        out[start : start + len(chunk)] = forward(params, g, sub).output
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path) -> None:
    """Little-endian f64 tensors preceded by a JSON manifest of names and shapes."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "aggregator": params.aggregator,
        "leaky_slope": params.leaky_slope,
        "tensors": [[name, list(value.shape)] for name, value in params.tensors.items()],
        "meta": params.meta,
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for value in params.tensors.values():
        buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        if blob[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic")
        version, n_head = struct.unpack("<II", blob[8:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        manifest = json.loads(blob[16 : 16 + n_head])
        pos = 16 + n_head
        tensors = {}
        for name, shape in manifest["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            chunk = blob[pos : pos + 8 * count]
            if len(chunk) != 8 * count:
                raise CheckpointError("truncated tensor data")
            tensors[name] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
            pos += 8 * count
        if pos != len(blob):
            raise CheckpointError("trailing bytes after tensors")
    except CheckpointError:
        raise
    except (ValueError, KeyError, struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return ModelParams(tensors, manifest["aggregator"], manifest["leaky_slope"], manifest.get("meta", {}))
