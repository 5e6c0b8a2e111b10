"""Ranking metrics at an inspection budget, sweeps and inductive subsets."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

from .data import TEST, TRAIN, DataError, Dataset, compute_osr

log = logging.getLogger(__name__)

REPORT_SCHEMA = "customsgnn.report"
REPORT_VERSION = 1
RANKING_KEYS = ("cls", "rev", "combined")
DEFAULT_PERCENTS = (0.01, 0.02, 0.05, 0.1)
CSV_FIELDS = ["variant", "seed", "n_percent", "precision", "recall", "revenue_ratio", "n_test"]


@dataclass(frozen=True)
class ScoredTransaction:
    txn_id: str
    y_cls_hat: float
    y_rev_hat: float
    illicit: Optional[bool] = None
    raised_revenue: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.y_cls_hat <= 1.0:
            raise ValueError(f"{self.txn_id}: y_cls_hat {self.y_cls_hat} outside [0, 1]")


@dataclass(frozen=True)
class RankedList:
    """Transactions in inspection order, stored column-wise."""

    txn_id: np.ndarray
    y_cls_hat: np.ndarray
    y_rev_hat: np.ndarray
    illicit: np.ndarray  # float, NaN when unknown
    raised_revenue: np.ndarray

    def __len__(self) -> int:
        return len(self.txn_id)

    def __getitem__(self, i) -> ScoredTransaction:
        y = self.illicit[i]
        return ScoredTransaction(
            str(self.txn_id[i]),
            float(self.y_cls_hat[i]),
            float(self.y_rev_hat[i]),
            None if np.isnan(y) else bool(y),
            None if np.isnan(y) else float(self.raised_revenue[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def labels(self) -> np.ndarray:
        if np.isnan(self.illicit).any():
            raise DataError("ground truth missing for ranked transactions")
        return self.illicit.astype(bool)


def _columns(scored) -> dict:
    if isinstance(scored, RankedList):
        return {k: getattr(scored, k) for k in ("txn_id", "y_cls_hat", "y_rev_hat", "illicit", "raised_revenue")}
    if isinstance(scored, pd.DataFrame):
        f = scored
        return {
            "txn_id": f["txn_id"].astype(str).to_numpy(),
            "y_cls_hat": f["y_cls_hat"].to_numpy(float),
            "y_rev_hat": f["y_rev_hat"].to_numpy(float),
            "illicit": f["illicit"].to_numpy(float) if "illicit" in f else np.full(len(f), np.nan),
            "raised_revenue": f["raised_revenue"].to_numpy(float) if "raised_revenue" in f else np.full(len(f), np.nan),
        }
    items = list(scored)
    return {
        "txn_id": np.array([s.txn_id for s in items], dtype=str),
        "y_cls_hat": np.array([s.y_cls_hat for s in items], dtype=float),
        "y_rev_hat": np.array([s.y_rev_hat for s in items], dtype=float),
        "illicit": np.array([np.nan if s.illicit is None else float(s.illicit) for s in items]),
        "raised_revenue": np.array([np.nan if s.raised_revenue is None else s.raised_revenue for s in items], dtype=float),
    }


def ranking_score(cls: np.ndarray, rev: np.ndarray, key: str) -> np.ndarray:
    if key == "cls":
        return np.asarray(cls, dtype=float)
    if key == "rev":
        return np.asarray(rev, dtype=float)
    if key == "combined":
        return np.asarray(cls, dtype=float) * np.maximum(np.asarray(rev, dtype=float), 0.0)
    raise ValueError(f"ranking key must be one of {RANKING_KEYS}")


def rank(scored, key: str = "cls") -> RankedList:
    """Descending by the chosen score; ties in ascending txn_id order."""
    cols = _columns(scored)
    score = ranking_score(cols["y_cls_hat"], cols["y_rev_hat"], key)
    order = np.lexsort((cols["txn_id"], -score))
    return RankedList(**{k: v[order] for k, v in cols.items()})


def budget(n_percent: float, n: int) -> int:
    """Number of inspections k = ceil(n_percent * n), computed in exact arithmetic."""
    if not 0 < n_percent <= 1:
        raise ValueError("n_percent must be a fraction in (0, 1]")
    return math.ceil(Fraction(repr(float(n_percent))) * n)


@dataclass(frozen=True)
class Metric:
    value: float
    undefined: bool = False  # zero positives (recall) or zero fraud revenue (revenue ratio)


def _prec_rec(y: np.ndarray, n_percent: float):
    k = budget(n_percent, len(y))
    tp = int(y[:k].sum())
    positives = int(y.sum())
    recall = Metric(tp / positives) if positives else Metric(0.0, undefined=True)
    return Metric(tp / k), recall


def precision_recall_at(ranked, n_percent: float) -> tuple[float, float]:
    """Precision and recall of the top ``ceil(n_percent * N)`` items.

    With no positives the recall is reported as 0; use
    :func:`evaluate` to get the accompanying flag.
    """
    if not isinstance(ranked, RankedList):
        ranked = RankedList(**_columns(ranked))
    if len(ranked) == 0:
        raise ValueError("empty ranking")
    p, r = _prec_rec(ranked.labels(), n_percent)
    return p.value, r.value


def _revenue(y: np.ndarray, surcharge: np.ndarray, n_percent: float) -> Metric:
    k = budget(n_percent, len(y))
    s = np.where(y, surcharge, 0.0)
    total = s.sum()
    if total <= 0:
        return Metric(0.0, undefined=True)
    return Metric(float(min(s[:k].sum() / total, 1.0)))


def revenue_at(ranked, n_percent: float) -> float:
    """Share of the total raised revenue of illicit items caught in the top k."""
    if not isinstance(ranked, RankedList):
        ranked = RankedList(**_columns(ranked))
    if len(ranked) == 0:
        raise ValueError("empty ranking")
    y = ranked.labels()
    rev = ranked.raised_revenue
    if np.isnan(rev[y]).any() or (rev[y] < 0).any():
        raise DataError("surcharges must be known and nonnegative for illicit items")
    return _revenue(y, np.nan_to_num(rev), n_percent).value


@dataclass
class EvalReport:
    variant: str
    seed: int
    metrics: dict  # n_percent -> {"precision", "recall", "revenue_ratio"}
    n_test: int
    ranking_key: str = "cls"
    flags: list = field(default_factory=list)
    osr: dict = field(default_factory=dict)
    config_digest: str = ""
    extra: dict = field(default_factory=dict)
    runtime: Optional[float] = None  # wall-clock seconds; not serialized

    def metric(self, name: str, n_percent: float) -> float:
        return self.metrics[float(n_percent)][name]

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "version": REPORT_VERSION,
            "variant": self.variant,
            "seed": self.seed,
            "ranking_key": self.ranking_key,
            "n_test": self.n_test,
            "config_digest": self.config_digest,
            "metrics": {repr(float(n)): {k: float(v) for k, v in m.items()} for n, m in sorted(self.metrics.items())},
            "flags": sorted(self.flags),
            "osr": self.osr,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        if doc.get("schema") != REPORT_SCHEMA or doc.get("version") != REPORT_VERSION:
            raise ValueError("not a supported report document")
        return cls(
            variant=doc["variant"],
            seed=doc["seed"],
            metrics={float(n): m for n, m in doc["metrics"].items()},
            n_test=doc["n_test"],
            ranking_key=doc["ranking_key"],
            flags=list(doc["flags"]),
            osr=doc["osr"],
            config_digest=doc["config_digest"],
            extra=doc.get("extra", {}),
        )

    def rows(self) -> list[dict]:
        return [
            {
                "variant": self.variant,
                "seed": self.seed,
                "n_percent": n,
                "precision": m["precision"],
                "recall": m["recall"],
                "revenue_ratio": m["revenue_ratio"],
                "n_test": self.n_test,
            }
            for n, m in sorted(self.metrics.items())
        ]


def write_reports_csv(reports: Iterable[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def evaluate(
    scored,
    percents: Sequence[float] = DEFAULT_PERCENTS,
    key: str = "cls",
    variant: str = "graphfc",
    seed: int = 0,
) -> EvalReport:
    ranked = rank(scored, key)
    if len(ranked) == 0:
        raise ValueError("nothing to evaluate")
    y = ranked.labels()
    surcharge = np.nan_to_num(ranked.raised_revenue)
    metrics, flags = {}, set()
    for n in percents:
        p, r = _prec_rec(y, n)
        rv = _revenue(y, surcharge, n)
        if r.undefined:
            flags.add("no_positives")
        if rv.undefined:
            flags.add("no_fraud_revenue")
        metrics[float(n)] = {"precision": p.value, "recall": r.value, "revenue_ratio": rv.value}
    return EvalReport(variant=variant, seed=seed, metrics=metrics, n_test=len(ranked), ranking_key=key, flags=sorted(flags))


def scored_frame(d: Dataset, cls: np.ndarray, rev: np.ndarray) -> pd.DataFrame:
    """Scores next to the ground truth of the same rows of ``d``."""
    return pd.DataFrame(
        {
            "txn_id": d.txn_ids.astype(str),
            "y_cls_hat": np.asarray(cls, dtype=float),
            "y_rev_hat": np.asarray(rev, dtype=float),
            "illicit": d.illicit,
            "raised_revenue": d.raised_revenue,
        }
    )


# ---------------------------------------------------------------------------
# experiment drivers


def unseen_subset(d: Dataset, key: str) -> np.ndarray:
    """Mask of test rows whose ``key`` value never occurs among labeled train rows."""
    split = d.split
    seen = set(d[key][(split == TRAIN) & d.labeled].astype(str))
    return (split == TEST) & ~np.isin(d[key].astype(str), list(seen))


def inductive_eval(
    model,
    d: Dataset,
    key: str = "importer_id",
    percents: Sequence[float] = DEFAULT_PERCENTS,
    ranking_key: str = "cls",
    variant: str = "graphfc",
    seed: int = 0,
) -> EvalReport:
    """Metrics restricted to test rows with a key value unseen in labeled train.

    ``model`` needs ``score(d, query_mask) -> (cls, rev)``.  The report's
    ``osr`` block holds the OSR of the whole test split and of the subset.
    """
    mask = unseen_subset(d, key)
    if not mask.any():
        raise DataError(f"no test transactions with an unseen {key}")
    cls, rev = model.score(d, mask)
    sub = d.where(mask)
    rep = evaluate(scored_frame(sub, cls, rev), percents, ranking_key, variant, seed)
    train = d.in_split(TRAIN)
    full = compute_osr(train, d.in_split(TEST), key)
    subset = compute_osr(train, sub, key)
    rep.osr = {
        key: {
            "test": {"seen": full.seen_count, "unseen": full.unseen_count, "osr": full.osr},
            "subset": {"seen": subset.seen_count, "unseen": subset.unseen_count, "osr": subset.osr},
        }
    }
    return rep


def sweep_inspection(
    cfg,
    d: Dataset,
    rates: Sequence[float] = (0.01, 0.02, 0.05, 0.1, 0.2),
    seeds: Sequence[int] = (0,),
    runner=None,
) -> pd.DataFrame:
    """One train+evaluate run per (inspection rate, seed), as a long table.

    ``d`` must already be split.  ``runner(cfg, masked_dataset) -> EvalReport``
    defaults to the full pipeline.  A failing cell is recorded in the
    ``error`` column and the sweep continues.
    """
    from .data import mask_labels
    from .training import run_pipeline

    if not rates or not seeds:
        raise ValueError("sweep needs at least one rate and one seed")
    if any(not 0 < r <= 1 for r in rates):
        raise ValueError("inspection rates must be fractions in (0, 1]")
    if runner is None:
        runner = lambda c, ds: run_pipeline(c, ds)[1]
    rows = []
    for rate in rates:
        for seed in seeds:
            cell = {"rate": float(rate), "seed": int(seed)}
            try:
                run_cfg = cfg.replace(seed=int(seed), inspection_rate=float(rate))
                rep = runner(run_cfg, mask_labels(d, rate, seed))
            except Exception as exc:  # recorded per cell
                log.warning("sweep cell rate=%s seed=%s failed: %s", rate, seed, exc)
                rows.append({**cell, "variant": "", "n_percent": np.nan, "precision": np.nan, "recall": np.nan, "revenue_ratio": np.nan, "error": str(exc)})
                continue
            for row in rep.rows():
                rows.append({**cell, **{k: row[k] for k in ("variant", "n_percent", "precision", "recall", "revenue_ratio")}, "error": ""})
    return pd.DataFrame(rows, columns=["rate", "seed", "variant", "n_percent", "precision", "recall", "revenue_ratio", "error"])


def export_embeddings(model, d: Dataset, rows: Optional[np.ndarray] = None, path=None) -> pd.DataFrame:
    """Final-layer embeddings of transactions plus an illicit/licit/unlabeled tag.

    ``rows`` indexes ``d`` (default: every row); output rows follow the
    order of ``d``.  Columns are ``e0..e{d-1}`` and ``label``.  Writes CSV
    when ``path`` is given.
    """
    rows = np.arange(len(d)) if rows is None else np.asarray(rows)
    mask = np.zeros(len(d), dtype=bool)
    mask[rows] = True
    emb = model.embed(d, mask)
    sub = d.where(mask)
    y = sub.illicit
    tag = np.where(~sub.labeled, "unlabeled", np.where(y == 1, "illicit", "licit"))
    frame = pd.DataFrame(emb, columns=[f"e{i}" for i in range(emb.shape[1])])
    frame["label"] = tag
    if path is not None:
        frame.to_csv(path, index=False, float_format="%.17g")
    return frame
