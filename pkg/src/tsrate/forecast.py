"""Forecaster interface, built-in baselines and external-prediction adapters.

Baselines: an AR-with-differencing model fit by least squares (the honest
numeric baseline), a biased system that offsets the truth per company, and a
random system drawing uniformly inside each company's historical range.
External models plug in through a prediction-exchange CSV or an HTTP
endpoint returning a list of d numbers.
"""

from __future__ import annotations

import csv
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Sequence, runtime_checkable

import numpy as np
import requests

from .core import DataError, EvalWindow, PredictionRecord
from .perturb import MISSING, derive_rng, is_missing

logger = logging.getLogger(__name__)


class ForecastError(ValueError):
    pass


@runtime_checkable
class Forecaster(Protocol):
    model_id: str
    modality: str  # "numeric" | "numeric+image"
    consumes_images: bool

    def predict(self, window: EvalWindow, history: Sequence[float],
                image: np.ndarray | None = None) -> list[float]:
        ...


def impute_locf(history: Sequence[object]) -> list[float]:
    """Replace MISSING markers by the last observed value; leading markers
    take the first observed value."""
    first_real = next((float(v) for v in history if not is_missing(v)), None)
    if first_real is None:
        raise ForecastError("history is entirely missing")
    out = []
    last = first_real
    for v in history:
        if is_missing(v):
            out.append(last)
        else:
            last = float(v)
            out.append(last)
    return out


# ---------------------------------------------------------------------------
# AR baseline
# ---------------------------------------------------------------------------

def _drift_forecast(history: np.ndarray, d: int) -> np.ndarray:
    slope = (history[-1] - history[0]) / (history.size - 1)
    return history[-1] + slope * np.arange(1, d + 1)


def ar_baseline(history: Sequence[object], d: int, p: int = 5, d_diff: int = 1) -> list[float]:
    """AR(p) on the d_diff-times differenced history, OLS fit, recursive
    d-step forecast, then un-differencing.

    Missing markers are imputed (last observation carried forward) before
    fitting.  The design matrix goes through lstsq, whose minimum-norm
    solution keeps collinear cases (constant differenced series) exact, so
    the drift fallback only triggers on non-finite fits.
    """
    values = np.asarray(impute_locf(history), dtype=np.float64)
    if values.size <= p + d_diff:
        raise ForecastError(
            f"history length {values.size} too short for p={p}, d_diff={d_diff}"
        )
    work = values.copy()
    tails = []  # last value at each differencing level, for integration
    for _ in range(d_diff):
        tails.append(work[-1])
        work = np.diff(work)

    rows = work.size - p
    X = np.ones((rows, p + 1), dtype=np.float64)
    for lag in range(1, p + 1):
        X[:, lag] = work[p - lag:work.size - lag]
    y = work[p:]
    try:
        beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    except np.linalg.LinAlgError:
        beta = None
    if beta is None or not np.all(np.isfinite(beta)):
        logger.warning("ar_baseline: degenerate fit, falling back to drift")
        return list(_drift_forecast(values, d))

    recent = list(work[-p:])
    level_preds = []
    for _ in range(d):
        nxt = beta[0] + float(np.dot(beta[1:], recent[::-1]))
        level_preds.append(nxt)
        recent = recent[1:] + [nxt]

    preds = np.asarray(level_preds, dtype=np.float64)
    for tail in reversed(tails):
        preds = tail + np.cumsum(preds)
    if not np.all(np.isfinite(preds)):
        logger.warning("ar_baseline: non-finite forecast, falling back to drift")
        return list(_drift_forecast(values, d))
    return list(preds)


@dataclass
class ArBaseline:
    model_id: str = "s_a"
    p: int = 5
    d_diff: int = 1
    modality: str = "numeric"
    consumes_images: bool = False

    def predict(self, window: EvalWindow, history: Sequence[object],
                image: np.ndarray | None = None) -> list[float]:
        return ar_baseline(history, window.d, p=self.p, d_diff=self.d_diff)


# ---------------------------------------------------------------------------
# biased and random systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CompanyRange:
    company: str
    low: float
    high: float

    def __post_init__(self) -> None:
        if self.low > self.high:
            raise DataError(f"range for {self.company!r} has low > high")


@dataclass
class BiasedSystem:
    """Prediction = truth + a per-company offset, so residuals are constant.

    The configured offsets pin two companies (one perfect, one moderately
    wrong); every other company takes the larger default offset.
    """

    model_id: str = "s_b"
    offsets: Mapping[str, float] = field(default_factory=lambda: {"META": 0.0, "GOOG": 200.0})
    default_offset: float | None = 400.0
    modality: str = "numeric+image"
    consumes_images: bool = False

    def offset_for(self, company: str) -> float:
        if company in self.offsets:
            return float(self.offsets[company])
        if self.default_offset is None:
            raise ForecastError(f"no offset configured for company {company!r}")
        return float(self.default_offset)

    def predict(self, window: EvalWindow, history: Sequence[object],
                image: np.ndarray | None = None) -> list[float]:
        off = self.offset_for(window.company)
        return [t + off for t in window.truth]


@dataclass
class RandomSystem:
    """Uniform draws inside the company's historical price range.

    Deterministic per (seed, window id): the same window always gets the
    same prediction regardless of perturbation or evaluation order.
    """

    ranges: Mapping[str, CompanyRange]
    seed: int = 0
    model_id: str = "s_r"
    modality: str = "numeric+image"
    consumes_images: bool = False

    def predict(self, window: EvalWindow, history: Sequence[object],
                image: np.ndarray | None = None) -> list[float]:
        if window.company not in self.ranges:
            raise ForecastError(f"no price range for company {window.company!r}")
        r = self.ranges[window.company]
        rng = derive_rng(self.seed, "random-system", window.window_id)
        return list(rng.uniform(r.low, r.high, size=window.d))


def company_ranges(series_list) -> dict[str, CompanyRange]:
    return {
        s.company: CompanyRange(s.company, min(s.values), max(s.values))
        for s in series_list
    }


# ---------------------------------------------------------------------------
# prediction exchange files
# ---------------------------------------------------------------------------

def export_predictions(records: Sequence[PredictionRecord], path: str | Path,
                       d: int) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "model_id", "perturbation"] + [f"v{i}" for i in range(1, d + 1)])
        for rec in records:
            writer.writerow(
                [rec.window_id, rec.model_id, rec.perturbation]
                + [repr(v) for v in rec.prediction]
            )


@dataclass(frozen=True)
class LoadReport:
    records: tuple[PredictionRecord, ...]
    rejects: tuple[tuple[int, str], ...]  # (row number, reason)


def load_external_predictions(path: str | Path, d: int,
                              known_window_ids: set[str] | None = None) -> LoadReport:
    """Read a prediction-exchange CSV; malformed values raise, unknown window
    ids and wrong-length rows are collected in the rejects report."""
    path = Path(path)
    if not path.exists():
        raise ForecastError(f"prediction file not found: {path}")
    records = []
    rejects = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ForecastError(f"{path}: empty file")
        if header[:3] != ["window_id", "model_id", "perturbation"]:
            raise ForecastError(f"{path}: unexpected header {header[:3]}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 + d:
                rejects.append((lineno, f"expected {3 + d} columns, got {len(row)}"))
                continue
            window_id, model_id, perturbation = row[:3]
            try:
                values = tuple(float(v) for v in row[3:])
            except ValueError as exc:
                raise ForecastError(f"{path}:{lineno}: bad number ({exc})")
            if known_window_ids is not None and window_id not in known_window_ids:
                rejects.append((lineno, f"unknown window id {window_id!r}"))
                continue
            records.append(
                PredictionRecord(
                    window_id=window_id,
                    model_id=model_id,
                    perturbation=perturbation,
                    prediction=values,
                )
            )
    return LoadReport(records=tuple(records), rejects=tuple(rejects))


# ---------------------------------------------------------------------------
# HTTP adapter
# ---------------------------------------------------------------------------

_NUMBER_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def parse_numbers(text: str, d: int) -> list[float]:
    """Extract exactly d numbers from a response body.

    Tries the whole text first; if that over-matches (prose with stray
    digits), falls back to the last bracketed chunk holding exactly d
    numbers.
    """
    matches = _NUMBER_RE.findall(text)
    if len(matches) == d:
        return [float(m) for m in matches]
    best = None
    for chunk in re.findall(r"\[[^\[\]]*\]", text):
        inner = _NUMBER_RE.findall(chunk)
        if len(inner) == d:
            best = inner
    if best is not None:
        return [float(m) for m in best]
    raise ForecastError(
        f"expected exactly {d} numbers in response, found {len(matches)}: {text[:200]!r}"
    )


def serialize_history(history: Sequence[object]) -> str:
    """Comma-separated history; MISSING markers become the literal `null`."""
    return ", ".join("null" if is_missing(v) else repr(float(v)) for v in history)


@dataclass
class HttpForecaster:
    """Calls a remote forecasting endpoint with a templated prompt.

    The template's {series} placeholder takes the serialized history; the
    raw response text is kept on the adapter for audit after each call.
    Transient failures retry with exponential backoff (bounded attempts).
    """

    model_id: str
    url: str
    d: int
    template: str = "Given these values: {series}. Forecast the next {d} steps."
    headers: Mapping[str, str] = field(default_factory=dict)
    timeout: float = 30.0
    attempts: int = 3
    backoff_base: float = 1.0
    modality: str = "numeric"
    consumes_images: bool = True
    last_response: str | None = None

    def __post_init__(self) -> None:
        self.consumes_images = "{image" in self.template

    def predict(self, window: EvalWindow, history: Sequence[object],
                image: np.ndarray | None = None) -> list[float]:
        prompt = self.template.format(
            series=serialize_history(history),
            d=self.d,
            image_b64=_image_b64(image) if image is not None else "",
        )
        last_exc: Exception | None = None
        for attempt in range(self.attempts):
            if attempt:
                time.sleep(self.backoff_base * 2 ** (attempt - 1))
            try:
                resp = requests.post(
                    self.url,
                    json={"prompt": prompt},
                    headers=dict(self.headers),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_exc = exc
                continue
            self.last_response = resp.text
            if resp.status_code >= 500:
                last_exc = ForecastError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ForecastError(
                    f"endpoint returned {resp.status_code}: {resp.text[:200]!r}"
                )
            return parse_numbers(resp.text, self.d)
        raise ForecastError(
            f"endpoint failed after {self.attempts} attempts: {last_exc}"
        )


def _image_b64(image: np.ndarray) -> str:
    import base64
    import io

    from PIL import Image as PILImage

    buf = io.BytesIO()
    PILImage.fromarray(image, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")
