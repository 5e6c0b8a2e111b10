"""Customs transaction datasets: CSV loading, temporal splits, label masking, OSR."""
from __future__ import annotations

import datetime as dt
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np
import pandas as pd

COLUMNS = [
    "txn_id",
    "date",
    "importer_id",
    "hs_code",
    "declared_value",
    "quantity",
    "gross_weight",
    "tariff_rate",
    "paid_tax",
    "illicit",
    "raised_revenue",
]
NUMERIC_COLUMNS = ["declared_value", "quantity", "gross_weight", "tariff_rate", "paid_tax"]
KEY_COLUMNS = ("importer_id", "hs_code")

TRAIN, VALID, TEST = "train", "valid", "test"


class DataError(ValueError):
    """Raised when input data violates the transaction schema or an operation's preconditions."""


@dataclass(frozen=True)
class TransactionRecord:
    txn_id: str
    date: dt.date
    importer_id: str
    hs_code: str
    declared_value: float
    quantity: float
    gross_weight: float
    tariff_rate: float
    paid_tax: float
    illicit: Optional[bool] = None
    raised_revenue: Optional[float] = None


@dataclass(frozen=True)
class OsrSummary:
    seen_count: int
    unseen_count: int

    @property
    def osr(self) -> float:
        return self.unseen_count / (self.seen_count + self.unseen_count)


class Dataset:
    """Immutable, column-oriented collection of transactions.

    Besides the CSV columns the frame carries ``split`` (``train``/``valid``/
    ``test`` or empty before splitting) and ``labeled``.  ``illicit`` is a
    float column (NaN when ground truth is missing) so that masking never
    destroys the truth needed for scoring.
    """

    def __init__(self, frame: pd.DataFrame):
        frame = frame.reset_index(drop=True).copy()
        if "split" not in frame:
            frame["split"] = ""
        if "labeled" not in frame:
            frame["labeled"] = frame["illicit"].notna().to_numpy()
        self._frame = frame

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def __getitem__(self, column: str) -> np.ndarray:
        values = self._frame[column].to_numpy()
        values = values.copy()
        values.setflags(write=False)
        return values

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._frame.equals(other._frame)

    def __repr__(self) -> str:
        counts = self._frame["split"].value_counts().to_dict()
        return f"Dataset(n={len(self)}, splits={counts}, labeled={int(self._frame['labeled'].sum())})"

    @property
    def txn_ids(self) -> np.ndarray:
        return self["txn_id"]

    @property
    def dates(self) -> np.ndarray:
        return self._frame["date"].to_numpy(dtype="datetime64[D]")

    @property
    def split(self) -> np.ndarray:
        return self["split"]

    @property
    def labeled(self) -> np.ndarray:
        return self["labeled"].astype(bool)

    @property
    def illicit(self) -> np.ndarray:
        return self._frame["illicit"].to_numpy(dtype=float)

    @property
    def raised_revenue(self) -> np.ndarray:
        return self._frame["raised_revenue"].to_numpy(dtype=float)

    def records(self) -> Iterator[TransactionRecord]:
        for row in self._frame.itertuples(index=False):
            illicit = None if pd.isna(row.illicit) else bool(row.illicit)
            revenue = None if pd.isna(row.raised_revenue) else float(row.raised_revenue)
            yield TransactionRecord(
                txn_id=row.txn_id,
                date=pd.Timestamp(row.date).date(),
                importer_id=row.importer_id,
                hs_code=row.hs_code,
                declared_value=float(row.declared_value),
                quantity=float(row.quantity),
                gross_weight=float(row.gross_weight),
                tariff_rate=float(row.tariff_rate),
                paid_tax=float(row.paid_tax),
                illicit=illicit,
                raised_revenue=revenue,
            )

    def where(self, mask: np.ndarray) -> "Dataset":
        return Dataset(self._frame.loc[np.asarray(mask, dtype=bool)])

    def in_split(self, *names: str) -> "Dataset":
        return self.where(np.isin(self.split, names))

    def replace(self, **columns) -> "Dataset":
        frame = self._frame.copy()
        for name, values in columns.items():
            frame[name] = values
        return Dataset(frame)

    def key_codes(self, key: str) -> tuple[np.ndarray, np.ndarray]:
        """Integer codes and unique values of a categorical key column."""
        uniques, codes = np.unique(self[key].astype(str), return_inverse=True)
        return codes, uniques

    @classmethod
    def from_records(cls, records) -> "Dataset":
        rows = [vars(r) if not isinstance(r, dict) else r for r in records]
        frame = pd.DataFrame(rows, columns=COLUMNS)
        frame["date"] = pd.to_datetime(frame["date"])
        frame["illicit"] = frame["illicit"].astype(float)
        frame["raised_revenue"] = frame["raised_revenue"].astype(float)
        _validate(frame, first_line=1)
        return cls(frame)


def _bad_rows(mask: np.ndarray, first_line: int) -> str:
    lines = (np.flatnonzero(mask) + first_line).tolist()
    shown = ", ".join(map(str, lines[:10]))
    return shown + (" ..." if len(lines) > 10 else "")


def _validate(frame: pd.DataFrame, first_line: int) -> None:
    dup = frame["txn_id"].duplicated(keep="first").to_numpy()
    if dup.any():
        raise DataError(f"duplicate txn_id at line(s) {_bad_rows(dup, first_line)}")
    illicit = frame["illicit"].to_numpy(dtype=float)
    revenue = frame["raised_revenue"].to_numpy(dtype=float)
    inconsistent = np.isnan(illicit) != np.isnan(revenue)
    if inconsistent.any():
        raise DataError(
            f"illicit/raised_revenue must be both present or both empty: line(s) {_bad_rows(inconsistent, first_line)}"
        )
    with np.errstate(invalid="ignore"):
        bad_rev = (revenue < 0) | ((illicit == 0) & (revenue != 0))
    if bad_rev.any():
        raise DataError(f"raised_revenue must be >= 0 and 0 for licit rows: line(s) {_bad_rows(bad_rev, first_line)}")
    checks = {
        "declared_value": frame["declared_value"] < 0,
        "quantity": frame["quantity"] <= 0,
        "gross_weight": frame["gross_weight"] <= 0,
        "tariff_rate": (frame["tariff_rate"] < 0) | (frame["tariff_rate"] > 1),
        "paid_tax": frame["paid_tax"] < 0,
    }
    for column, bad in checks.items():
        bad = bad.to_numpy()
        if bad.any():
            raise DataError(f"{column} out of range at line(s) {_bad_rows(bad, first_line)}")


def _parse_illicit(values: pd.Series, first_line: int) -> np.ndarray:
    table = {"": np.nan, "0": 0.0, "1": 1.0, "false": 0.0, "true": 1.0, "0.0": 0.0, "1.0": 1.0}
    lowered = values.str.strip().str.lower()
    parsed = lowered.map(table)
    bad = parsed.isna().to_numpy() & (lowered != "").to_numpy()
    if bad.any():
        raise DataError(f"unparsable illicit flag at line(s) {_bad_rows(bad, first_line)}")
    return parsed.to_numpy(dtype=float)


def load_csv(path, schema: Optional[Mapping[str, str]] = None) -> Dataset:
    """Read a transaction CSV into a :class:`Dataset`.

    ``schema`` optionally maps canonical column names to the names used in
    the file.  Line numbers in error messages count the header as line 1.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    schema = dict(schema or {})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    rename = {schema.get(c, c): c for c in COLUMNS}
    missing = [src for src in rename if src not in raw.columns]
    if missing:
        raise DataError(f"missing column(s): {', '.join(missing)}")
    raw = raw.rename(columns=rename)[COLUMNS]
    first_line = 2

    frame = pd.DataFrame({"txn_id": raw["txn_id"].str.strip()})
    dates = pd.to_datetime(raw["date"], format="%Y-%m-%d", errors="coerce")
    if dates.isna().any():
        raise DataError(f"unparsable date at line(s) {_bad_rows(dates.isna().to_numpy(), first_line)}")
    frame["date"] = dates
    for key in KEY_COLUMNS:
        values = raw[key].str.strip()
        if (values == "").any():
            raise DataError(f"empty {key} at line(s) {_bad_rows((values == '').to_numpy(), first_line)}")
        frame[key] = values
    for column in NUMERIC_COLUMNS:
        parsed = pd.to_numeric(raw[column].str.strip(), errors="coerce")
        if parsed.isna().any():
            raise DataError(f"unparsable {column} at line(s) {_bad_rows(parsed.isna().to_numpy(), first_line)}")
        frame[column] = parsed.astype(float)
    frame["illicit"] = _parse_illicit(raw["illicit"], first_line)
    revenue = raw["raised_revenue"].str.strip()
    parsed = pd.to_numeric(revenue.replace("", np.nan), errors="coerce")
    unparsable = parsed.isna().to_numpy() & (revenue != "").to_numpy()
    if unparsable.any():
        raise DataError(f"unparsable raised_revenue at line(s) {_bad_rows(unparsable, first_line)}")
    frame["raised_revenue"] = parsed.astype(float)
    _validate(frame, first_line)
    return Dataset(frame)


def write_csv(d: Dataset, path) -> None:
    """Write the CSV columns of ``d`` in the format read by :func:`load_csv`."""
    frame = d.frame[COLUMNS].copy()
    frame["date"] = pd.to_datetime(frame["date"]).dt.strftime("%Y-%m-%d")
    illicit = frame["illicit"]
    frame["illicit"] = np.where(illicit.isna(), "", illicit.fillna(0).astype(int).astype(str))
    revenue = frame["raised_revenue"]
    frame["raised_revenue"] = [("" if np.isnan(v) else repr(float(v))) for v in revenue.to_numpy(dtype=float)]
    for column in NUMERIC_COLUMNS:
        frame[column] = [repr(float(v)) for v in frame[column].to_numpy(dtype=float)]
    frame.to_csv(path, index=False, lineterminator="\n")


def temporal_split(d: Dataset, test_from, valid_fraction: float = 0.2) -> Dataset:
    """Tag records as train/valid/test by date.

    Records dated on or after ``test_from`` become test.  The rest are sorted
    by (date, txn_id) and the latest ``valid_fraction`` of them become valid.
    """
    if not 0 < valid_fraction < 1:
        raise DataError("valid_fraction must be in (0, 1)")
    test_from = np.datetime64(pd.Timestamp(test_from).date(), "D")
    dates = d.dates
    is_test = dates >= test_from
    rest = np.flatnonzero(~is_test)
    order = rest[np.lexsort((d.txn_ids[rest].astype(str), dates[rest]))]
    n_valid = int(math.floor(valid_fraction * len(order) + 0.5))
    split = np.full(len(d), TRAIN, dtype=object)
    split[is_test] = TEST
    split[order[len(order) - n_valid:]] = VALID
    for name in (TRAIN, VALID, TEST):
        if not (split == name).any():
            raise DataError(f"temporal_split produced an empty {name} split")
    labeled = ~np.isnan(d.illicit)
    return d.replace(split=split, labeled=labeled & (split != TEST))


def mask_labels(d: Dataset, inspection_rate: float, seed: int) -> Dataset:
    """Keep labels for a seeded uniform sample of the train records.

    Exactly ``round_half_up(inspection_rate * n_train)`` train records stay
    labeled.  Validation records are always labeled; test records are never
    marked labeled (their ground truth is kept for scoring).
    """
    if not 0 < inspection_rate <= 1:
        raise DataError("inspection_rate must be in (0, 1]")
    split = d.split
    train = np.flatnonzero(split == TRAIN)
    if np.isnan(d.illicit[train]).any():
        raise DataError("train records need ground truth before masking")
    n_keep = int(math.floor(inspection_rate * len(train) + 0.5))
    if n_keep == 0:
        raise DataError("inspection rate leaves zero labeled records")
    rng = np.random.default_rng(seed)
    keep = rng.choice(len(train), size=n_keep, replace=False)
    labeled = np.zeros(len(d), dtype=bool)
    labeled[train[keep]] = True
    labeled[split == VALID] = True
    return d.replace(labeled=labeled)


def compute_osr(train: Dataset, test: Dataset, key: str) -> OsrSummary:
    """Out-of-sample ratio of ``test`` key values against labeled ``train`` rows."""
    if len(test) == 0:
        raise DataError("compute_osr needs a nonempty test set")
    seen_pool = set(train[key][train.labeled].astype(str))
    test_keys = set(test[key].astype(str))
    seen = len(test_keys & seen_pool)
    return OsrSummary(seen_count=seen, unseen_count=len(test_keys) - seen)


def select_osr_subset(d: Dataset, key: str, target_osr: float, seed: int) -> Dataset:
    """Relabel train rows so that the test set has the requested OSR on ``key``.

    A seeded ``1 - target_osr`` share of key values is marked as seen; every
    train transaction of a seen key becomes labeled and all other train
    transactions become unlabeled.  Test key values absent from train are
    always unseen, which bounds the reachable targets from below.
    """
    if not 0 <= target_osr <= 1:
        raise DataError("target_osr must be in [0, 1]")
    split = d.split
    keys = d[key].astype(str)
    train_keys = np.unique(keys[split == TRAIN])
    test_keys = np.unique(keys[split == TEST])
    if len(test_keys) == 0:
        raise DataError("no test records")
    n_unseen = int(math.floor(target_osr * len(test_keys) + 0.5))
    forced = np.setdiff1d(test_keys, train_keys)
    if len(forced) > n_unseen:
        raise DataError(
            f"target OSR {target_osr} unreachable: {len(forced)} of {len(test_keys)} test keys never occur in train"
        )
    rng = np.random.default_rng(seed)
    eligible = np.intersect1d(test_keys, train_keys)
    extra_unseen = rng.choice(eligible, size=n_unseen - len(forced), replace=False)
    seen_test = np.setdiff1d(eligible, extra_unseen)
    other = np.setdiff1d(train_keys, test_keys)
    n_other = int(math.floor((1 - target_osr) * len(other) + 0.5))
    seen_other = rng.choice(other, size=n_other, replace=False) if n_other else other[:0]
    seen = np.union1d(seen_test, seen_other)
    labeled = (split == TRAIN) & np.isin(keys, seen)
    if not labeled.any():
        raise DataError("target OSR leaves zero labeled records")
    labeled |= split == VALID
    return d.replace(labeled=labeled)
