"""Shared fixtures: synthetic six-company price corpus, config builders, and
the curated reference rating fixture."""

from __future__ import annotations

import json
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import pytest

from tsrate.perturb import derive_rng

DATA_DIR = Path(__file__).parent / "data"

COMPANIES = (
    ("META", "social technology", 300.0),
    ("GOOG", "social technology", 2800.0),
    ("PFE", "pharmaceuticals", 40.0),
    ("MRK", "pharmaceuticals", 110.0),
    ("WFC", "financial services", 45.0),
    ("C", "financial services", 50.0),
)


def business_days(count: int = 252, start: date = date(2023, 1, 2)) -> list[date]:
    days = []
    d = start
    while len(days) < count:
        if d.weekday() < 5:
            days.append(d)
        d += timedelta(days=1)
    return days


def synthetic_prices(company: str, base: float, count: int = 252) -> np.ndarray:
    rng = derive_rng(20230102, "corpus", company)
    steps = rng.normal(0.0, base * 0.01, size=count)
    prices = base + np.cumsum(steps)
    # keep prices comfortably positive so ranges and ratios stay sane
    prices = np.maximum(prices, base * 0.2)
    return np.round(prices, 2)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("corpus")
    days = business_days()
    for company, _industry, base in COMPANIES:
        prices = synthetic_prices(company, base)
        lines = ["date,close"]
        lines += [f"{d.isoformat()},{p}" for d, p in zip(days, prices)]
        (root / f"{company}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def config_dict(corpus_dir: Path, **overrides) -> dict:
    """Baselines-only run config over the synthetic corpus; override top-level
    keys via kwargs."""
    cfg = {
        "version": 1,
        "seed": 7,
        "out_dir": "out",
        "window": {"n": 80, "d": 20, "stride": 20},
        "dataset": {
            "price_column": "close",
            "series": [
                {"path": str(corpus_dir / f"{c}.csv"), "company": c, "industry": ind}
                for c, ind, _ in COMPANIES
            ],
        },
        "perturbations": [
            {"tag": "P0"},
            {"tag": "P1", "period": 5},
            {"tag": "P2", "period": 7},
            {"tag": "P3", "period": 6},
            {"tag": "P4"},
            {"tag": "P5"},
            {"tag": "P6"},
        ],
        "distributions": [
            {"name": "di1", "confounder": "industry", "favored": "pharmaceuticals", "seed": 11},
            {"name": "dc1", "confounder": "company", "favored": "PFE", "seed": 13},
        ],
        "models": [
            {"kind": "ar_baseline", "model_id": "s_a"},
            {"kind": "biased", "model_id": "s_b",
             "offsets": {"META": 0.0, "GOOG": 200.0}, "default_offset": 400.0},
            {"kind": "random", "model_id": "s_r", "seed": 5},
        ],
        "metrics": {
            "l_levels": 3,
            "residual_mode": "absolute",
            "wrs": {"cis": [95, 75, 60], "weights": [1.0, 0.8, 0.6]},
        },
    }
    cfg.update(overrides)
    return cfg


@pytest.fixture()
def make_config(corpus_dir, tmp_path):
    """Write a config JSON into this test's tmp dir; returns the path."""

    def _write(name: str = "config.json", **overrides) -> Path:
        cfg = config_dict(corpus_dir, **overrides)
        path = tmp_path / name
        path.write_text(json.dumps(cfg, indent=2), encoding="utf-8")
        return path

    return _write


@pytest.fixture(scope="session")
def golden() -> dict:
    with (DATA_DIR / "golden_ratings.json").open(encoding="utf-8") as fh:
        return json.load(fh)
