"""Bipartite transaction graph with virtual key nodes, and seeded fixed fan-out sampling.

Node ids are global integers: transactions first (``0 .. n_txn-1``), then one
contiguous block of virtual nodes per key column.  Adjacency is stored in CSR
form with a neighbour order fixed at build time, which together with the
counter-based random numbers below makes every sampled subgraph a pure
function of ``(graph, root, fanouts, seed)``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .data import Dataset


class NodeKind(enum.IntEnum):
    TXN = 0
    IMPORTER = 1
    HS_CODE = 2
    IMPORTER_HS = 3


KEY_KINDS = {
    "importer_id": NodeKind.IMPORTER,
    "hs_code": NodeKind.HS_CODE,
    "importer_hs": NodeKind.IMPORTER_HS,
}
DEFAULT_KEYS = ("importer_id", "hs_code")


class Variant(str, enum.Enum):
    FULL = "full"
    LABELED_ONLY = "labeled"
    UNLABELED_ONLY = "unlabeled"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        aliases = {"g": "full", "g_l": "labeled", "g_u": "unlabeled", "labeledonly": "labeled", "unlabeledonly": "unlabeled"}
        text = str(value).lower()
        return cls(aliases.get(text, text))


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class NodeRef:
    kind: NodeKind
    id: int


def key_column(d: Dataset, key: str) -> np.ndarray:
    if key == "importer_hs":
        return np.char.add(np.char.add(d["importer_id"].astype(str), "|"), d["hs_code"].astype(str))
    return d[key].astype(str)


@dataclass(frozen=True, eq=False)
class TransactionGraph:
    keys: tuple
    key_values: tuple  # per key: array of the distinct values, indexed by local id
    offsets: np.ndarray  # start of each kind block; offsets[0] == 0 (transactions)
    indptr: np.ndarray
    indices: np.ndarray
    features: sp.csr_matrix  # transaction rows only; virtual nodes are implicit zeros
    labeled: np.ndarray
    dates: np.ndarray  # int days since epoch
    rows: np.ndarray  # row index of each transaction node in the source Dataset
    txn_ids: np.ndarray

    @property
    def n_txn(self) -> int:
        return len(self.rows)

    @property
    def n_nodes(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def kinds(self) -> tuple:
        return (NodeKind.TXN,) + tuple(KEY_KINDS[k] for k in self.keys)

    @property
    def nbytes(self) -> int:
        arrays = [self.indptr, self.indices, self.labeled, self.dates, self.rows, self.offsets]
        arrays += [self.features.data, self.features.indices, self.features.indptr]
        return int(sum(a.nbytes for a in arrays))

    def degree(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes)
        return self.indptr[nodes + 1] - self.indptr[nodes]

    def block_of(self, nodes) -> np.ndarray:
        """Index into ``kinds`` for each global node id."""
        return np.searchsorted(self.offsets, np.asarray(nodes), side="right") - 1

    def is_txn(self, nodes) -> np.ndarray:
        return np.asarray(nodes) < self.n_txn

    def global_id(self, ref: NodeRef) -> int:
        kinds = self.kinds
        if ref.kind not in kinds:
            raise GraphError(f"graph has no {ref.kind.name} nodes")
        block = kinds.index(ref.kind)
        end = self.offsets[block + 1] if block + 1 < len(self.offsets) else self.n_nodes
        node = int(self.offsets[block]) + int(ref.id)
        if not 0 <= ref.id or node >= end:
            raise GraphError(f"unknown node {ref}")
        return node

    def node_ref(self, node: int) -> NodeRef:
        if not 0 <= node < self.n_nodes:
            raise GraphError(f"unknown node id {node}")
        block = int(self.block_of(node))
        return NodeRef(self.kinds[block], int(node - self.offsets[block]))

    def txn_node(self, txn_id: str) -> int:
        hits = np.flatnonzero(self.txn_ids == txn_id)
        if not len(hits):
            raise GraphError(f"transaction {txn_id} is not in the graph")
        return int(hits[0])

    def virtual_of(self, txn_nodes) -> np.ndarray:
        """(n, n_keys) virtual neighbours of transaction nodes, in key order."""
        txn_nodes = np.asarray(txn_nodes)
        starts = self.indptr[txn_nodes]
        return self.indices[starts[:, None] + np.arange(len(self.keys))[None, :]]


def build_graph(
    d: Dataset,
    m,
    variant=Variant.FULL,
    keys: Sequence[str] = DEFAULT_KEYS,
    always_include: Optional[np.ndarray] = None,
) -> TransactionGraph:
    """Build the transaction/virtual-node graph.

    ``m`` holds one feature row per record of ``d`` (a CrossFeatureMatrix,
    sparse matrix or dense array).  ``variant`` selects which transactions
    enter: all, labeled only, or unlabeled only.  Rows flagged in
    ``always_include`` enter regardless of the variant (used to add query
    transactions to a training graph at inference time).
    """
    variant = Variant.parse(variant)
    keys = tuple(keys)
    if not keys or len(set(keys)) != len(keys) or any(k not in KEY_KINDS for k in keys):
        raise GraphError(f"invalid key set {keys}")
    if hasattr(m, "to_csr"):
        feats = m.to_csr()
    elif sp.issparse(m):
        feats = sp.csr_matrix(m)
    else:
        feats = sp.csr_matrix(np.asarray(m, dtype=float))
    if feats.shape[0] != len(d):
        raise GraphError(f"feature rows ({feats.shape[0]}) do not align with records ({len(d)})")

    labeled = d.labeled
    if variant is Variant.FULL:
        include = np.ones(len(d), dtype=bool)
    elif variant is Variant.LABELED_ONLY:
        include = labeled.copy()
    else:
        include = ~labeled
    if always_include is not None:
        include |= np.asarray(always_include, dtype=bool)
    rows = np.flatnonzero(include)
    n = len(rows)
    if n == 0:
        raise GraphError(f"{variant.value} graph would be empty")

    codes, values = [], []
    bounds = [0, n]
    for key in keys:
        uniq, inv = np.unique(key_column(d, key)[rows], return_inverse=True)
        codes.append(inv.astype(np.int64) + bounds[-1])
        values.append(uniq)
        bounds.append(bounds[-1] + len(uniq))
    offsets = np.asarray(bounds[:-1], dtype=np.int64)
    n_nodes = bounds[-1]

    l = len(keys)
    txn_nbrs = np.column_stack(codes).astype(np.int64)  # (n, l)
    src = np.concatenate(codes)
    tgt = np.tile(np.arange(n, dtype=np.int64), l)
    order = np.argsort(src, kind="stable")  # virtual lists keep transaction order
    v_counts = np.bincount(src - n, minlength=n_nodes - n)
    indptr = np.concatenate([[0], np.full(n, l).cumsum(), n * l + v_counts.cumsum()]).astype(np.int64)
    indices = np.concatenate([txn_nbrs.ravel(), tgt[order]])

    days = d.dates[rows].astype("datetime64[D]").astype(np.int64)
    return TransactionGraph(
        keys=keys,
        key_values=tuple(values),
        offsets=offsets,
        indptr=indptr,
        indices=indices,
        features=feats[rows],
        labeled=labeled[rows],
        dates=days,
        rows=rows,
        txn_ids=d.txn_ids[rows].astype(str),
    )


def neighbors(g: TransactionGraph, node: NodeRef) -> list[NodeRef]:
    gid = g.global_id(node)
    return [g.node_ref(int(j)) for j in g.indices[g.indptr[gid] : g.indptr[gid + 1]]]


# ---------------------------------------------------------------------------
# counter-based random numbers

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + _GOLDEN).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def hashed_uniform(*streams) -> np.ndarray:
    """Uniform [0, 1) floats that depend only on the given integer streams."""
    arrays = np.broadcast_arrays(*[np.asarray(s, dtype=np.int64) for s in streams])
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for a in arrays:
        h = _mix(h ^ a.astype(np.uint64))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def choose_subsets(counts: np.ndarray, k: int, *streams) -> tuple[np.ndarray, np.ndarray]:
    """Uniform size-min(k, count) subsets of range(count) for many segments at once.

    Returns ``(segment, local_index)`` sorted by segment then index.  Segments
    larger than ``k`` use Floyd's algorithm driven by :func:`hashed_uniform`
    on ``streams + (draw,)``; ``streams`` are per-segment arrays.
    """
    counts = np.asarray(counts, dtype=np.int64)
    small = counts <= k
    seg_small = np.repeat(np.flatnonzero(small), counts[small])
    starts = np.cumsum(counts[small]) - counts[small]
    loc_small = np.arange(len(seg_small)) - np.repeat(starts, counts[small])
    big = np.flatnonzero(~small)
    if len(big) == 0:
        return seg_small, loc_small
    c = counts[big]
    chosen = np.empty((len(big), k), dtype=np.int64)
    streams_big = [np.asarray(s)[big] for s in streams]
    for i in range(k):
        j = c - k + i
        u = hashed_uniform(*streams_big, np.full(len(big), i))
        t = np.minimum((u * (j + 1)).astype(np.int64), j)
        seen = (chosen[:, :i] == t[:, None]).any(axis=1)
        chosen[:, i] = np.where(seen, j, t)
    chosen.sort(axis=1)
    seg = np.concatenate([seg_small, np.repeat(big, k)])
    loc = np.concatenate([loc_small, chosen.ravel()])
    order = np.lexsort((loc, seg))
    return seg[order], loc[order]


@dataclass(frozen=True)
class SampledSubgraph:
    """Sampled computation trees for one or more roots.

    ``nodes[h]`` are the global ids at hop ``h`` (``nodes[0]`` are the roots)
    and ``parents[h][i]`` is the position in hop ``h-1`` of the node that
    sampled ``nodes[h][i]``; ``parents[0]`` is empty.  Positions are grouped
    by root in root order at every hop.
    """

    roots: np.ndarray
    nodes: tuple
    parents: tuple
    fanouts: tuple

    @property
    def n_hops(self) -> int:
        return len(self.nodes) - 1

    @property
    def n_positions(self) -> int:
        return int(sum(len(n) for n in self.nodes))

    def root_index(self, hop: int) -> np.ndarray:
        """For each position at ``hop``, the index of its root in ``roots``."""
        idx = np.arange(len(self.roots))
        for h in range(1, hop + 1):
            idx = idx[self.parents[h]]
        return idx

    def sizes_per_root(self) -> np.ndarray:
        total = np.zeros(len(self.roots), dtype=np.int64)
        for h in range(self.n_hops + 1):
            total += np.bincount(self.root_index(h), minlength=len(self.roots))
        return total

    def for_root(self, i: int) -> "SampledSubgraph":
        keep = [np.flatnonzero(np.arange(len(self.roots)) == i)]
        nodes, parents = [self.nodes[0][keep[0]]], [np.empty(0, dtype=np.int64)]
        for h in range(1, self.n_hops + 1):
            mask = np.isin(self.parents[h], keep[-1])
            pos = np.flatnonzero(mask)
            remap = {int(p): j for j, p in enumerate(keep[-1])}
            nodes.append(self.nodes[h][pos])
            parents.append(np.asarray([remap[int(p)] for p in self.parents[h][pos]], dtype=np.int64))
            keep.append(pos)
        return SampledSubgraph(nodes[0].copy(), tuple(nodes), tuple(parents), self.fanouts)


def sample_batch(
    g: TransactionGraph,
    roots,
    fanouts: Sequence[int],
    seed: int,
    history_cutoff=None,
) -> SampledSubgraph:
    """Sample a K-hop computation tree below every root.

    Hop ``h`` draws, for each node at hop ``h-1``, ``min(T_h, #candidates)``
    distinct neighbours.  With ``history_cutoff`` set, transactions dated
    after it are not candidates, except the tree's own root.  Random draws
    are keyed on (seed, root, hop, position within the root's tree), so a
    root's tree does not depend on which other roots share the batch.
    An integer cutoff counts days since 1970-01-01; anything else is parsed
    as a date.
    """
    roots = np.asarray(roots, dtype=np.int64).ravel()
    fanouts = tuple(int(t) for t in fanouts)
    if not fanouts or min(fanouts) < 1:
        raise GraphError("fanouts must be a nonempty list of positive integers")
    if len(roots) and (roots.min() < 0 or roots.max() >= g.n_nodes):
        raise GraphError("unknown root node")
    cutoff = None
    if history_cutoff is not None:
        if isinstance(history_cutoff, (int, np.integer)):
            cutoff = int(history_cutoff)
        else:
            cutoff = np.datetime64(pd.Timestamp(history_cutoff).date(), "D").astype(np.int64)

    nodes = [roots]
    parents = [np.empty(0, dtype=np.int64)]
    root_of = np.arange(len(roots))
    for hop, fanout in enumerate(fanouts, start=1):
        par = nodes[-1]
        start, deg = g.indptr[par], g.degree(par)
        local = np.arange(len(par)) - np.searchsorted(root_of, root_of, side="left")
        streams = (np.full(len(par), seed), roots[root_of], np.full(len(par), hop), local)
        if cutoff is None:
            seg, loc = choose_subsets(deg, fanout, *streams)
            child = g.indices[start[seg] + loc]
        else:
            owner = np.repeat(np.arange(len(par)), deg)
            flat = g.indices[np.repeat(start - np.cumsum(deg) + deg, deg) + np.arange(deg.sum())]
            ok = ~g.is_txn(flat)
            txn = ~ok
            ok[txn] = (g.dates[flat[txn]] <= cutoff) | (flat[txn] == roots[root_of[owner[txn]]])
            valid_pos = np.flatnonzero(ok)
            counts = np.bincount(owner[ok], minlength=len(par))
            seg, loc = choose_subsets(counts, fanout, *streams)
            first = np.cumsum(counts) - counts
            child = flat[valid_pos[first[seg] + loc]]
        nodes.append(child.astype(np.int64))
        parents.append(seg.astype(np.int64))
        root_of = root_of[seg]
    return SampledSubgraph(roots, tuple(nodes), tuple(parents), fanouts)


def sample_subgraph(g: TransactionGraph, root, fanouts: Sequence[int], seed: int, history_cutoff=None) -> SampledSubgraph:
    """Single-root form of :func:`sample_batch`; ``root`` is a NodeRef or global id."""
    gid = g.global_id(root) if isinstance(root, NodeRef) else int(root)
    if not 0 <= gid < g.n_nodes:
        raise GraphError(f"unknown root {root}")
    return sample_batch(g, [gid], fanouts, seed, history_cutoff)


def dump_graph(g: TransactionGraph, path) -> None:
    """Debug dump: ``<path>.edges`` holds little-endian (u32 kind, u64 id) endpoint
    pairs, one pair of endpoints per edge; ``<path>.json`` holds the counts."""
    path = Path(path)
    dtype = np.dtype([("kind", "<u4"), ("id", "<u8")])
    txn = np.repeat(np.arange(g.n_txn), len(g.keys))
    virt = g.indices[: g.n_txn * len(g.keys)]
    block = g.block_of(virt)
    kinds = np.asarray(g.kinds)
    rec = np.empty(2 * len(txn), dtype=dtype)
    rec["kind"][0::2] = NodeKind.TXN
    rec["id"][0::2] = txn
    rec["kind"][1::2] = kinds[block]
    rec["id"][1::2] = virt - g.offsets[block]
    path.with_suffix(".edges").write_bytes(rec.tobytes())
    header = {
        "n_transactions": g.n_txn,
        "n_nodes": g.n_nodes,
        "n_edges": g.n_edges,
        "keys": list(g.keys),
        "virtual_counts": {k: int(len(v)) for k, v in zip(g.keys, g.key_values)},
        "record": "u32 kind, u64 id (little endian); two records per edge",
    }
    path.with_suffix(".json").write_text(json.dumps(header, indent=2))
