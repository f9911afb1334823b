"""Shared data model: labeled series, sliding windows, residuals, causal frame.

Everything downstream (perturbations, forecasting, metrics, ratings) consumes
the types defined here.  All containers are immutable after construction and
all operations are pure functions, so window-level work can run in parallel
without shared state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_WINDOW = 80
DEFAULT_HORIZON = 20


class DataError(ValueError):
    """Raised when an input violates a structural contract."""


# ---------------------------------------------------------------------------
# types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSeries:
    """A univariate price series tagged with its company and industry.

    The industry label doubles as the sensitive attribute for the bias
    analyses; the company-to-industry mapping must be one-to-one across a
    dataset (enforced when a manifest is assembled, not here).
    """

    values: tuple[float, ...]
    timestamps: tuple[date, ...]
    company: str
    industry: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.values) != len(self.timestamps):
            raise DataError(
                f"values ({len(self.values)}) and timestamps "
                f"({len(self.timestamps)}) differ in length"
            )
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if not a < b:
                raise DataError(f"timestamps not strictly increasing at {a!r} -> {b!r}")
        for i, v in enumerate(self.values):
            if not math.isfinite(v):
                raise DataError(f"non-finite value at index {i}")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class EvalWindow:
    """One sliding-window sample: n history values and the next d truths."""

    window_id: str
    history: tuple[float, ...]
    truth: tuple[float, ...]
    company: str
    industry: str
    n: int = DEFAULT_WINDOW
    d: int = DEFAULT_HORIZON

    def __post_init__(self) -> None:
        object.__setattr__(self, "history", tuple(float(v) for v in self.history))
        object.__setattr__(self, "truth", tuple(float(v) for v in self.truth))
        if self.n < 1 or self.d < 1:
            raise DataError("n and d must be >= 1")
        if len(self.history) != self.n:
            raise DataError(f"history length {len(self.history)} != n={self.n}")
        if len(self.truth) != self.d:
            raise DataError(f"truth length {len(self.truth)} != d={self.d}")

    @property
    def history_array(self) -> np.ndarray:
        return np.asarray(self.history, dtype=np.float64)

    @property
    def truth_array(self) -> np.ndarray:
        return np.asarray(self.truth, dtype=np.float64)


@dataclass(frozen=True)
class PredictionRecord:
    """Model output for one window under one perturbation tag."""

    window_id: str
    model_id: str
    perturbation: str
    prediction: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "prediction", tuple(float(v) for v in self.prediction))


@dataclass(frozen=True)
class ResidualRecord:
    window_id: str
    model_id: str
    perturbation: str
    residuals: tuple[float, ...]
    max_residual: float


@dataclass(frozen=True)
class CausalRow:
    model_id: str
    perturbation: str
    company: str
    industry: str
    max_residual: float


@dataclass(frozen=True)
class CausalFrame:
    """Flat table of (model, perturbation, company, industry, R^max) rows.

    This is the single input shape for every robustness metric.  Row order is
    preserved from construction and used as the deterministic tiebreaker in
    matching, so callers must build frames in a stable order.
    """

    rows: tuple[CausalRow, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))

    def __len__(self) -> int:
        return len(self.rows)

    def filter(self, model_id: str | None = None, perturbation: str | None = None) -> "CausalFrame":
        rows = [
            r
            for r in self.rows
            if (model_id is None or r.model_id == model_id)
            and (perturbation is None or r.perturbation == perturbation)
        ]
        return CausalFrame(tuple(rows))

    def residuals_by(self, group_field: str) -> dict[str, np.ndarray]:
        """Group max residuals by 'company' or 'industry'; keys sorted."""
        if group_field not in ("company", "industry"):
            raise DataError(f"unknown group field {group_field!r}")
        groups: dict[str, list[float]] = {}
        for r in self.rows:
            key = getattr(r, group_field)
            groups.setdefault(key, []).append(r.max_residual)
        return {k: np.asarray(groups[k], dtype=np.float64) for k in sorted(groups)}

    def industries(self) -> dict[str, "CausalFrame"]:
        out: dict[str, list[CausalRow]] = {}
        for r in self.rows:
            out.setdefault(r.industry, []).append(r)
        return {k: CausalFrame(tuple(out[k])) for k in sorted(out)}

    def perturbations(self) -> list[str]:
        return sorted({r.perturbation for r in self.rows})


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def window_count(series_len: int, n: int, d: int, stride: int) -> int:
    return (series_len - n - d) // stride + 1


def slide_windows(series: LabeledSeries, n: int = DEFAULT_WINDOW, d: int = DEFAULT_HORIZON,
                  stride: int = 1) -> list[EvalWindow]:
    """Cut a labeled series into contiguous (history, truth) windows.

    Windows start at offsets 0, stride, 2*stride, ...; each history slice is
    immediately followed by its truth slice in the source series.
    """
    if n < 1 or d < 1 or stride < 1:
        raise DataError("n, d and stride must all be >= 1")
    if len(series) < n + d:
        raise DataError(
            f"series {series.company!r} has {len(series)} values; "
            f"needs at least n + d = {n + d}"
        )
    windows = []
    for start in range(0, len(series) - n - d + 1, stride):
        window_id = f"{series.company}-{start:05d}"
        windows.append(
            EvalWindow(
                window_id=window_id,
                history=series.values[start:start + n],
                truth=series.values[start + n:start + n + d],
                company=series.company,
                industry=series.industry,
                n=n,
                d=d,
            )
        )
    return windows


def residuals(pred: PredictionRecord, window: EvalWindow,
              mode: str = "absolute") -> ResidualRecord:
    """Per-step residuals (prediction - truth) plus the window's worst error.

    mode 'absolute' takes max |residual| (default: a large negative error is
    as bad as a large positive one); 'signed' takes the plain maximum.
    """
    if pred.window_id != window.window_id:
        raise DataError(
            f"prediction for window {pred.window_id!r} applied to {window.window_id!r}"
        )
    if len(pred.prediction) != window.d:
        raise DataError(
            f"prediction length {len(pred.prediction)} != horizon d={window.d}"
        )
    for i, v in enumerate(pred.prediction):
        if not math.isfinite(v):
            raise DataError(f"non-finite prediction at index {i} "
                            f"(window {window.window_id!r}, model {pred.model_id!r})")
    if mode not in ("absolute", "signed"):
        raise DataError(f"unknown residual mode {mode!r}")
    res = tuple(p - t for p, t in zip(pred.prediction, window.truth))
    if mode == "absolute":
        max_res = max(abs(r) for r in res)
    else:
        max_res = max(res)
    return ResidualRecord(
        window_id=window.window_id,
        model_id=pred.model_id,
        perturbation=pred.perturbation,
        residuals=res,
        max_residual=float(max_res),
    )


def build_causal_frame(records: Iterable[ResidualRecord],
                       labels: Mapping[str, tuple[str, str]]) -> CausalFrame:
    """Join residual records with (company, industry) labels per window id."""
    rows = []
    for rec in records:
        if rec.window_id not in labels:
            raise DataError(f"window id {rec.window_id!r} has no labels")
        company, industry = labels[rec.window_id]
        rows.append(
            CausalRow(
                model_id=rec.model_id,
                perturbation=rec.perturbation,
                company=company,
                industry=industry,
                max_residual=rec.max_residual,
            )
        )
    return CausalFrame(tuple(rows))


def label_index(windows: Sequence[EvalWindow]) -> dict[str, tuple[str, str]]:
    return {w.window_id: (w.company, w.industry) for w in windows}
