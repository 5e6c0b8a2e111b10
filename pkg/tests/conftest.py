import numpy as np
import pandas as pd
import pytest

from customsgnn.data import COLUMNS, Dataset
from customsgnn.synth import SynthConfig, generate


def make_frame(rows):
    """Build a frame from (txn_id, date, importer, hs, illicit) tuples with filler numerics."""
    out = []
    for txn_id, date, imp, hs, y in rows:
        out.append(
            {
                "txn_id": txn_id,
                "date": pd.Timestamp(date),
                "importer_id": imp,
                "hs_code": hs,
                "declared_value": 100.0,
                "quantity": 2.0,
                "gross_weight": 10.0,
                "tariff_rate": 0.1,
                "paid_tax": 10.0,
                "illicit": np.nan if y is None else float(y),
                "raised_revenue": np.nan if y is None else (5.0 if y else 0.0),
            }
        )
    return pd.DataFrame(out, columns=COLUMNS)


@pytest.fixture
def tiny_dataset():
    rows = [
        ("t0", "2020-01-01", "i1", "100000", 0),
        ("t1", "2020-01-02", "i2", "100000", 1),
        ("t2", "2020-01-03", "i1", "200000", 0),
    ]
    return Dataset(make_frame(rows))


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(n_transactions=2000, n_importers=120, n_hs_codes=40, seed=7, base_illicit_rate=0.08))


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
