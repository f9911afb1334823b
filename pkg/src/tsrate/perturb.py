"""Input perturbations P0-P6 and the weighted treatment-assignment sampler.

Numeric perturbations (P1 drop-to-zero, P2 halve, P3 missing) edit every
period-th value of a history window.  Image perturbations (P4 center pixel,
P5 saturation, P6 sentiment stripe) edit the multi-modal raster inputs.
P0 is the unperturbed control for both modalities.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import DataError

logger = logging.getLogger(__name__)

NUMERIC_TAGS = ("P0", "P1", "P2", "P3")
IMAGE_TAGS = ("P0", "P4", "P5", "P6")
ALL_TAGS = ("P0", "P1", "P2", "P3", "P4", "P5", "P6")


class PerturbationError(ValueError):
    pass


class _MissingType:
    """Sentinel for a removed value; deliberately not a float or NaN."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MISSING"


MISSING = _MissingType()


def is_missing(x: object) -> bool:
    return x is MISSING


@dataclass(frozen=True)
class PerturbationKind:
    """Tag P0..P6 plus the index period carried by the numeric kinds."""

    tag: str
    period: int | None = None
    phase: int = 0

    def __post_init__(self) -> None:
        if self.tag not in ALL_TAGS:
            raise PerturbationError(f"unknown perturbation tag {self.tag!r}")
        if self.tag in ("P1", "P2", "P3"):
            if self.period is None or self.period < 1:
                raise PerturbationError(f"{self.tag} requires period >= 1")
            if self.phase < 0:
                raise PerturbationError("phase must be >= 0")
        elif self.period is not None:
            raise PerturbationError(f"{self.tag} carries no period")

    @property
    def touches_numeric(self) -> bool:
        return self.tag in ("P1", "P2", "P3")

    @property
    def touches_image(self) -> bool:
        return self.tag in ("P4", "P5", "P6")


# ---------------------------------------------------------------------------
# numeric perturbations
# ---------------------------------------------------------------------------

def _hit_indices(length: int, period: int, phase: int) -> range:
    # every period-th element, 1-based, so the first hit is index period-1
    return range(phase + period - 1, length, period)


def drop_to_zero(history: Sequence[float], period: int, phase: int = 0) -> list[float]:
    """P1: every period-th value set to zero."""
    if period < 1:
        raise PerturbationError("period must be >= 1")
    out = [float(v) for v in history]
    for i in _hit_indices(len(out), period, phase):
        out[i] = 0.0
    return out


def halve(history: Sequence[float], period: int, phase: int = 0) -> list[float]:
    """P2: every period-th value reduced to half."""
    if period < 1:
        raise PerturbationError("period must be >= 1")
    out = [float(v) for v in history]
    for i in _hit_indices(len(out), period, phase):
        out[i] = out[i] / 2.0
    return out


def missing(history: Sequence[float], period: int, phase: int = 0) -> list:
    """P3: every period-th value replaced by the MISSING sentinel."""
    if period < 1:
        raise PerturbationError("period must be >= 1")
    out: list = [float(v) for v in history]
    for i in _hit_indices(len(out), period, phase):
        out[i] = MISSING
    return out


def apply_numeric(kind: PerturbationKind, history: Sequence[float]) -> list:
    if kind.tag == "P1":
        return drop_to_zero(history, kind.period, kind.phase)
    if kind.tag == "P2":
        return halve(history, kind.period, kind.phase)
    if kind.tag == "P3":
        return missing(history, kind.period, kind.phase)
    return [float(v) for v in history]


# ---------------------------------------------------------------------------
# image perturbations
# ---------------------------------------------------------------------------

def _check_raster(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise PerturbationError(f"expected uint8 RGB raster, got {arr.dtype} {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PerturbationError("empty image")
    return arr


def pixel_center_black(image: np.ndarray) -> np.ndarray:
    """P4: set the center pixel (floor(w/2), floor(h/2)) to black."""
    arr = _check_raster(image).copy()
    h, w = arr.shape[:2]
    arr[h // 2, w // 2] = (0, 0, 0)
    return arr


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB->HSV on float arrays in [0, 1], shape (..., 3)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    c = maxc - minc
    s = np.where(maxc > 0, c / np.where(maxc > 0, maxc, 1.0), 0.0)
    h = np.zeros_like(v)
    mask = c > 0
    safe_c = np.where(mask, c, 1.0)
    rm = mask & (maxc == r)
    gm = mask & (maxc == g) & ~rm
    bm = mask & (maxc == b) & ~rm & ~gm
    h = np.where(rm, ((g - b) / safe_c) % 6.0, h)
    h = np.where(gm, (b - r) / safe_c + 2.0, h)
    h = np.where(bm, (r - g) / safe_c + 4.0, h)
    h = h / 6.0
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def saturation_x10(image: np.ndarray) -> np.ndarray:
    """P5: S := clamp(10 * S, 0, 1) per pixel; H and V preserved."""
    arr = _check_raster(image)
    hsv = rgb_to_hsv(arr.astype(np.float64) / 255.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * 10.0, 0.0, 1.0)
    rgb = hsv_to_rgb(hsv)
    return np.rint(rgb * 255.0).astype(np.uint8)


@runtime_checkable
class SentimentProvider(Protocol):
    """Maps a plotted series to a sentiment label in {-1, 0, 1}."""

    def sentiment(self, values: Sequence[float]) -> int:
        ...


@dataclass(frozen=True)
class SlopeSignSentiment:
    """Deterministic provider: sign of the least-squares slope of the series.

    Slopes within the dead band count as neutral so that flat series do not
    flip label on floating-point noise.
    """

    dead_band: float = 1e-9

    def sentiment(self, values: Sequence[float]) -> int:
        arr = np.asarray(values, dtype=np.float64)
        if arr.size < 2:
            raise PerturbationError("sentiment needs at least 2 values")
        x = np.arange(arr.size, dtype=np.float64)
        slope = float(np.polyfit(x, arr, 1)[0])
        if abs(slope) <= self.dead_band:
            return 0
        return 1 if slope > 0 else -1


SENTIMENT_GRAY = {-1: 0, 0: 128, 1: 255}


def sentiment_stripe(line_plot: np.ndarray, provider: SentimentProvider,
                     values: Sequence[float], stripe_rows: int = 16) -> np.ndarray:
    """P6: overwrite the top stripe of a line plot with the sentiment gray.

    Label map {-1 -> 0, 0 -> 128, 1 -> 255}: darker means more negative.
    """
    arr = _check_raster(line_plot)
    try:
        label = provider.sentiment(values)
    except Exception as exc:  # noqa: BLE001 - provider diagnostic must surface
        raise PerturbationError(f"sentiment provider failed: {exc}") from exc
    if label not in SENTIMENT_GRAY:
        raise PerturbationError(f"provider returned label {label!r}, expected -1, 0 or 1")
    out = arr.copy()
    out[:stripe_rows, :, :] = SENTIMENT_GRAY[label]
    return out


def apply_image(kind: PerturbationKind, image: np.ndarray,
                provider: SentimentProvider | None = None,
                values: Sequence[float] | None = None) -> np.ndarray:
    if kind.tag == "P4":
        return pixel_center_black(image)
    if kind.tag == "P5":
        return saturation_x10(image)
    if kind.tag == "P6":
        if provider is None or values is None:
            raise PerturbationError("P6 needs a sentiment provider and the series values")
        return sentiment_stripe(image, provider, values)
    return _check_raster(image).copy()


# ---------------------------------------------------------------------------
# treatment assignment
# ---------------------------------------------------------------------------

def derive_rng(seed: int, *tokens: object) -> np.random.Generator:
    """Deterministic per-item generator keyed by (seed, tokens).

    The token hash goes into the spawn key, so any (seed, tokens) pair maps to
    a fixed stream regardless of evaluation order or platform.
    """
    joined = "\x1f".join(str(t) for t in tokens).encode("utf-8")
    digest = hashlib.sha256(joined).digest()
    words = tuple(int.from_bytes(digest[i:i + 4], "big") for i in range(0, 16, 4))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=words)
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class TreatmentDistribution:
    """Weighted sampler spec: the favored confounder value draws non-control
    perturbations with `weight_ratio` times the control weight."""

    name: str
    confounder_field: str  # company | industry
    favored_value: str
    weight_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.weight_ratio <= 0:
            raise PerturbationError("weight_ratio must be > 0")
        if self.confounder_field not in ("company", "industry"):
            raise PerturbationError(
                f"unknown confounder field {self.confounder_field!r}"
            )


def assign_treatments(confounder_values: Sequence[str],
                      distribution: TreatmentDistribution,
                      tags: Sequence[str] = ALL_TAGS) -> list[str]:
    """Draw one perturbation tag per row, deterministic per (seed, row index).

    Favored rows use weights (1 for P0, ratio for each other tag); all other
    rows draw uniformly.
    """
    if distribution.favored_value not in set(confounder_values):
        raise PerturbationError(
            f"favored value {distribution.favored_value!r} not present in rows"
        )
    tags = list(tags)
    if "P0" not in tags:
        raise PerturbationError("assignment tag set must include the control P0")
    favored_w = np.array(
        [1.0 if t == "P0" else distribution.weight_ratio for t in tags], dtype=np.float64
    )
    favored_w /= favored_w.sum()
    uniform_w = np.full(len(tags), 1.0 / len(tags))
    out = []
    for i, value in enumerate(confounder_values):
        rng = derive_rng(distribution.seed, distribution.name, i)
        p = favored_w if value == distribution.favored_value else uniform_w
        out.append(tags[int(rng.choice(len(tags), p=p))])
    return out
