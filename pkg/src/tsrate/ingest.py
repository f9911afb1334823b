"""CSV ingestion and series standardization.

Loads daily price CSVs (date + close columns, Yahoo-Finance-like layout) into
LabeledSeries and assembles the multi-company dataset described by a manifest.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DataError, LabeledSeries

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    company: str
    industry: str


@dataclass(frozen=True)
class DatasetManifest:
    """List of (csv, company, industry) entries plus an optional date range."""

    entries: tuple[ManifestEntry, ...]
    date_start: date | None = None
    date_end: date | None = None
    price_column: str = "close"  # or "adjusted"

    def __post_init__(self) -> None:
        companies = [e.company for e in self.entries]
        if len(set(companies)) != len(companies):
            raise DataError("manifest companies must be unique")
        if not self.entries:
            raise DataError("manifest has no entries")
        if self.price_column not in ("close", "adjusted"):
            raise DataError(f"unknown price column mode {self.price_column!r}")
        # one industry per company is per-entry by construction; the
        # companies-unique check above keeps the mapping single-valued

    def industries(self) -> list[str]:
        return sorted({e.industry for e in self.entries})


def _parse_date(text: str) -> date:
    text = text.strip()
    try:
        return date.fromisoformat(text)
    except ValueError:
        pass
    try:
        return datetime.strptime(text, "%m/%d/%Y").date()
    except ValueError:
        raise DataError(f"unparseable date {text!r} (expected ISO 8601 or MM/DD/YYYY)")


def _find_column(headers: Sequence[str], wanted: Sequence[str]) -> int | None:
    lowered = [h.strip().lower() for h in headers]
    for name in wanted:
        if name in lowered:
            return lowered.index(name)
    return None


def load_csv(path: str | Path, company: str, industry: str,
             date_start: date | None = None, date_end: date | None = None,
             price_column: str = "close") -> LabeledSeries:
    """Load one price CSV into a LabeledSeries sorted by date.

    Rows whose price cell fails to parse are skipped (counted in a warning);
    rows with unparseable dates are rejected outright rather than guessed.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"csv file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            headers = next(reader)
        except StopIteration:
            raise DataError(f"empty csv file: {path}")
        date_idx = _find_column(headers, ["date"])
        if price_column == "adjusted":
            price_idx = _find_column(headers, ["adj close", "adj_close", "adjusted close"])
        else:
            price_idx = _find_column(headers, ["close"])
        if date_idx is None or price_idx is None:
            raise DataError(
                f"{path}: required columns missing; available headers: {headers}"
            )
        rows: list[tuple[date, float]] = []
        skipped = 0
        for raw in reader:
            if not raw or all(not cell.strip() for cell in raw):
                continue
            when = _parse_date(raw[date_idx])
            if date_start is not None and when < date_start:
                continue
            if date_end is not None and when > date_end:
                continue
            try:
                price = float(raw[price_idx])
            except (ValueError, IndexError):
                skipped += 1
                continue
            rows.append((when, price))
    if skipped:
        logger.warning("%s: skipped %d rows with unparseable prices", path, skipped)
    if not rows:
        raise DataError(f"{path}: no usable rows")
    rows.sort(key=lambda r: r[0])
    for (a, _), (b, _) in zip(rows, rows[1:]):
        if a == b:
            raise DataError(f"{path}: duplicate date {a}")
    return LabeledSeries(
        values=tuple(price for _, price in rows),
        timestamps=tuple(when for when, _ in rows),
        company=company,
        industry=industry,
    )


def load_manifest(manifest: DatasetManifest) -> list[LabeledSeries]:
    return [
        load_csv(
            e.path,
            e.company,
            e.industry,
            date_start=manifest.date_start,
            date_end=manifest.date_end,
            price_column=manifest.price_column,
        )
        for e in manifest.entries
    ]


def standardize(values: Sequence[float]) -> np.ndarray:
    """Zero-mean unit-variance rescale (population sigma); constant -> zeros."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise DataError("standardize needs a 1-d sequence of length >= 2")
    sigma = float(arr.std())
    if sigma == 0.0:
        return np.zeros_like(arr)
    return (arr - arr.mean()) / sigma
