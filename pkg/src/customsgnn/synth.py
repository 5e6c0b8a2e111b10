"""Synthetic customs declarations with planted importer- and HS-level fraud risk."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit, logit

from .data import COLUMNS, Dataset

TARIFF_LEVELS = np.array([0.05, 0.08, 0.1, 0.15, 0.2, 0.3])


@dataclass(frozen=True)
class SynthConfig:
    n_transactions: int = 50_000
    n_importers: int = 2_000
    n_hs_codes: int = 300
    base_illicit_rate: float = 0.0412
    importer_effect: float = 1.5
    hs_effect: float = 0.8
    feature_noise: float = 0.6
    date_range: tuple = ("2014-01-01", "2017-12-31")
    seed: int = 0
    # weight of the row-level unit-value term in the illicitness logit
    unit_value_effect: float = 0.6
    # how strongly risky importers under-declare (log unit value per unit of risk)
    price_shift: float = 0.4
    label_noise: float = 0.3

    def __post_init__(self):
        for name in ("n_transactions", "n_importers", "n_hs_codes"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.base_illicit_rate < 1:
            raise ValueError("base_illicit_rate must be in [0, 1)")
        if self.feature_noise < 0 or self.label_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        start, end = (pd.Timestamp(x) for x in self.date_range)
        if not start < end:
            raise ValueError("date_range start must precede end")

    @classmethod
    def from_dict(cls, values: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown synth option(s): {', '.join(sorted(unknown))}")
        values = dict(values)
        if "date_range" in values:
            values["date_range"] = tuple(str(x) for x in values["date_range"])
        return cls(**values)


def _calibrated_intercept(eta: np.ndarray, rate: float) -> float:
    """Intercept b such that mean(sigmoid(b + eta)) == rate."""
    target = lambda b: expit(b + eta).mean() - rate
    lo, hi = logit(rate) - 40.0, logit(rate) + 40.0
    return brentq(target, lo, hi, xtol=1e-12)


def generate(cfg: SynthConfig) -> Dataset:
    """Draw a synthetic dataset; identical configs give identical datasets.

    Illicitness follows a logistic model on importer risk, HS-code risk and
    the standardized log unit value.  Risky importers also declare lower unit
    prices, so aggregating an importer's transactions reveals its risk even
    when none of them are labeled.
    """
    rng = np.random.default_rng(cfg.seed)
    n, n_imp, n_hs = cfg.n_transactions, cfg.n_importers, cfg.n_hs_codes

    importer_risk = rng.standard_normal(n_imp)
    hs_risk = rng.standard_normal(n_hs)
    imp_popularity = rng.lognormal(0.0, 1.0, n_imp)
    hs_popularity = rng.lognormal(0.0, 1.0, n_hs)
    hs_log_price = rng.normal(3.0, 1.0, n_hs)
    hs_kg_per_unit = rng.lognormal(0.0, 1.0, n_hs)
    hs_tariff = rng.choice(TARIFF_LEVELS, n_hs)
    hs_codes = np.sort(rng.choice(900_000, n_hs, replace=False) + 100_000).astype(str)

    importer = rng.choice(n_imp, n, p=imp_popularity / imp_popularity.sum())
    hs = rng.choice(n_hs, n, p=hs_popularity / hs_popularity.sum())
    start, end = (pd.Timestamp(x) for x in cfg.date_range)
    span_days = (end - start).days
    day = rng.integers(0, span_days + 1, n)

    quantity = np.ceil(rng.lognormal(2.0, 1.0, n))
    log_unit_value = (
        hs_log_price[hs] - cfg.price_shift * importer_risk[importer] + cfg.feature_noise * rng.standard_normal(n)
    )
    declared = quantity * np.exp(log_unit_value)
    weight = quantity * hs_kg_per_unit[hs] * rng.lognormal(0.0, 0.2, n)
    tariff = hs_tariff[hs]

    z = (log_unit_value - log_unit_value.mean()) / max(log_unit_value.std(), 1e-12)
    eta = (
        cfg.importer_effect * importer_risk[importer]
        + cfg.hs_effect * hs_risk[hs]
        - cfg.unit_value_effect * z
        + cfg.label_noise * rng.standard_normal(n)
    )
    if cfg.base_illicit_rate == 0:
        illicit = np.zeros(n, dtype=bool)
    else:
        prob = expit(_calibrated_intercept(eta, cfg.base_illicit_rate) + eta)
        illicit = rng.random(n) < prob
    underval = rng.uniform(0.1, 0.5, n)
    true_value = declared / (1.0 - underval)
    revenue = np.where(illicit, tariff * (true_value - declared), 0.0)

    order = np.lexsort((np.arange(n), day))
    dates = (np.datetime64(start.date(), "D") + day.astype("timedelta64[D]"))[order]
    frame = pd.DataFrame(
        {
            "txn_id": [f"T{i:08d}" for i in range(n)],
            "date": pd.to_datetime(dates),
            "importer_id": np.char.add("IMP", np.char.zfill(importer[order].astype(str), 6)),
            "hs_code": hs_codes[hs[order]],
            "declared_value": np.round(declared[order], 2),
            "quantity": quantity[order],
            "gross_weight": np.maximum(np.round(weight[order], 3), 0.001),
            "tariff_rate": tariff[order],
            "paid_tax": np.round(tariff[order] * declared[order], 2),
            "illicit": illicit[order].astype(float),
            "raised_revenue": np.round(revenue[order], 2),
        },
        columns=COLUMNS,
    )
    # rounding can push tiny revenues to zero
    frame.loc[(frame["illicit"] == 1) & (frame["raised_revenue"] <= 0), "raised_revenue"] = 0.01
    frame.loc[frame["declared_value"] <= 0, "declared_value"] = 0.01
    return Dataset(frame)
