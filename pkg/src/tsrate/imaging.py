"""Multi-modal inputs: Morlet spectrograms with a numeric stripe, line plots.

The wavelet is psi(x) = sqrt(1/s) * pi^(-1/4) * exp(-x^2 / (2 s^2))
* exp(j w0 x / s) with central frequency w0 = 5.  The transform is a direct
convolution with zero padding; output images are 128 x 128 RGB with a 16-row
grayscale stripe of the standardized series on top of a 112-row spectrogram
body ordered high frequency at the top.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import DataError

OMEGA0 = 5.0
IMAGE_SIZE = 128
STRIPE_ROWS = 16
BODY_ROWS = IMAGE_SIZE - STRIPE_ROWS
MID_GRAY = 128


@dataclass(frozen=True)
class Spectrogram:
    """Magnitude grid (scales x time); row i belongs to scales[i], ascending,
    so the first row is the highest frequency."""

    magnitudes: np.ndarray
    scales: np.ndarray
    omega0: float = OMEGA0

    def __post_init__(self) -> None:
        if self.magnitudes.ndim != 2:
            raise DataError("magnitudes must be 2-d")
        if self.magnitudes.shape[0] != self.scales.shape[0]:
            raise DataError("one scale per magnitude row required")
        if np.any(self.magnitudes < 0):
            raise DataError("magnitudes must be non-negative")


@dataclass(frozen=True)
class ComposedImage:
    raster: np.ndarray
    stripe_rows: int = STRIPE_ROWS

    def __post_init__(self) -> None:
        h, w = self.raster.shape[:2]
        if (h, w) != (IMAGE_SIZE, IMAGE_SIZE) or self.raster.shape[2] != 3:
            raise DataError(f"composed image must be {IMAGE_SIZE}x{IMAGE_SIZE} RGB")


def morlet(x: float | np.ndarray, s: float | np.ndarray,
           omega0: float = OMEGA0) -> complex | np.ndarray:
    """Complex Morlet wavelet value at offset x for scale s."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr <= 0):
        raise DataError("scale s must be > 0")
    x_arr = np.asarray(x, dtype=np.float64)
    envelope = np.sqrt(1.0 / s_arr) * np.pi ** (-0.25) * np.exp(-x_arr ** 2 / (2.0 * s_arr ** 2))
    wave = np.exp(1j * omega0 * x_arr / s_arr)
    out = envelope * wave
    if np.isscalar(x) and np.isscalar(s):
        return complex(out)
    return out


def default_scales(n: int, rows: int = BODY_ROWS, omega0: float = OMEGA0) -> np.ndarray:
    """Log-spaced scale grid covering oscillation periods from 2 to n samples.

    The wavelet at scale s oscillates with period 2*pi*s/omega0 samples, so
    s = omega0 * T / (2*pi) maps a target period T onto a scale.
    """
    if n < 2:
        raise DataError("need n >= 2 to build a scale grid")
    periods = np.geomspace(2.0, float(n), rows)
    return omega0 * periods / (2.0 * np.pi)


def cwt(values: np.ndarray, scales: np.ndarray, omega0: float = OMEGA0) -> Spectrogram:
    """Direct-convolution wavelet transform, same-length output per scale.

    magnitudes[i][t] = | sum_u values[u] * conj(psi(u - t; scales[i])) |
    with implicit zero padding outside the series.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise DataError("cwt needs a 1-d series of length >= 2")
    s = np.asarray(scales, dtype=np.float64)
    if s.ndim != 1 or s.size == 0 or np.any(s <= 0):
        raise DataError("scales must be positive")
    if np.any(np.diff(s) <= 0):
        raise DataError("scales must be strictly ascending")
    n = v.size
    offsets = np.arange(n)[:, None] - np.arange(n)[None, :]  # (u, t) -> u - t
    psi = morlet(offsets[None, :, :], s[:, None, None], omega0)
    coeffs = np.einsum("u,sut->st", v, np.conj(psi))
    return Spectrogram(magnitudes=np.abs(coeffs), scales=s, omega0=omega0)


def _resample_row(row: np.ndarray, width: int) -> np.ndarray:
    if row.size == width:
        return row.astype(np.float64)
    src = np.linspace(0.0, 1.0, row.size)
    dst = np.linspace(0.0, 1.0, width)
    return np.interp(dst, src, row)


def _to_gray(grid: np.ndarray) -> np.ndarray:
    lo, hi = float(grid.min()), float(grid.max())
    if hi == lo:
        return np.full(grid.shape, MID_GRAY, dtype=np.uint8)
    scaled = (grid - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def compose_image(spec: Spectrogram, stripe_values: np.ndarray) -> ComposedImage:
    """Stack the standardized-series stripe on top of the spectrogram body.

    Both parts are min-max scaled to [0, 255] per image; degenerate constant
    grids render mid-gray instead of failing.
    """
    stripe = _resample_row(np.asarray(stripe_values, dtype=np.float64), IMAGE_SIZE)
    body = np.vstack([
        _resample_row(row, IMAGE_SIZE) for row in spec.magnitudes
    ])
    if body.shape[0] != BODY_ROWS:
        body = _resample_col(body, BODY_ROWS)
    stripe_gray = np.tile(_to_gray(stripe), (STRIPE_ROWS, 1))
    body_gray = _to_gray(body)
    gray = np.vstack([stripe_gray, body_gray])
    raster = np.repeat(gray[:, :, None], 3, axis=2)
    return ComposedImage(raster=raster)


def _resample_col(grid: np.ndarray, rows: int) -> np.ndarray:
    if grid.shape[0] == rows:
        return grid
    src = np.linspace(0.0, 1.0, grid.shape[0])
    dst = np.linspace(0.0, 1.0, rows)
    return np.vstack([
        np.interp(dst, src, grid[:, j]) for j in range(grid.shape[1])
    ]).T


def render_lineplot(values: np.ndarray, size: int = IMAGE_SIZE,
                    margin: int = 4) -> np.ndarray:
    """Deterministic 1-px black polyline of the series on a white canvas.

    x maps the sample index onto [margin, size-1-margin]; y is min-max scaled
    with larger values higher on the canvas (row index grows downward).
    Constant series draw at the integer middle row.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise DataError("line plot needs a 1-d series of length >= 2")
    canvas = np.full((size, size, 3), 255, dtype=np.uint8)
    lo, hi = float(v.min()), float(v.max())
    span = size - 1 - 2 * margin
    xs = np.rint(np.linspace(margin, size - 1 - margin, v.size)).astype(int)
    if hi == lo:
        ys = np.full(v.size, (size - 1) // 2, dtype=int)
    else:
        frac = (v - lo) / (hi - lo)
        ys = np.rint((size - 1 - margin) - frac * span).astype(int)
    for (x0, y0), (x1, y1) in zip(zip(xs, ys), zip(xs[1:], ys[1:])):
        for x, y in _bresenham(x0, y0, x1, y1):
            canvas[y, x] = (0, 0, 0)
    return canvas


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def save_png(raster: np.ndarray, path: str | Path) -> None:
    Image.fromarray(raster, mode="RGB").save(Path(path), format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(Path(path)) as img:
        return np.asarray(img.convert("RGB"))
