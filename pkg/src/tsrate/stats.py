"""Statistical kernels used by the bias and causal metrics.

Student's t-test (pooled variance), critical-value lookup, propensity
estimation by logistic regression, and nearest-neighbor propensity matching.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats as _scipy_stats

from .core import DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TTestResult:
    t: float
    dof: float
    p_two_sided: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_two_sided <= 1.0):
            raise DataError(f"p-value out of range: {self.p_two_sided}")
        if self.dof <= 0:
            raise DataError(f"dof must be positive, got {self.dof}")


def students_t(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sample pooled-variance Student's t.

    Degenerate pooled variance: equal means give t = 0 (identical constant
    samples are indistinguishable), unequal means give the +inf sentinel that
    rejects at every confidence level.
    """
    xa = np.asarray(a, dtype=np.float64)
    xb = np.asarray(b, dtype=np.float64)
    if xa.size < 2 or xb.size < 2:
        raise DataError("each sample needs at least 2 values")
    na, nb = xa.size, xb.size
    dof = na + nb - 2
    mean_a, mean_b = float(xa.mean()), float(xb.mean())
    ss = float(((xa - mean_a) ** 2).sum() + ((xb - mean_b) ** 2).sum())
    pooled_var = ss / dof
    if pooled_var == 0.0:
        if mean_a == mean_b:
            return TTestResult(t=0.0, dof=float(dof), p_two_sided=1.0)
        return TTestResult(t=math.inf, dof=float(dof), p_two_sided=0.0)
    se = math.sqrt(pooled_var * (1.0 / na + 1.0 / nb))
    t = (mean_a - mean_b) / se
    p = 2.0 * float(_scipy_stats.t.sf(abs(t), dof))
    return TTestResult(t=float(t), dof=float(dof), p_two_sided=min(p, 1.0))


def t_critical(ci: float, dof: float) -> float:
    """Two-sided critical value at the given confidence percentage."""
    if not 0.0 < ci < 100.0:
        raise DataError(f"ci must be in (0, 100), got {ci}")
    if dof < 1:
        raise DataError(f"dof must be >= 1, got {dof}")
    alpha = 1.0 - ci / 100.0
    return float(_scipy_stats.t.ppf(1.0 - alpha / 2.0, dof))


# ---------------------------------------------------------------------------
# propensity estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PropensityResult:
    """Per-row treatment probabilities; NaN rows belong to categories that
    violate positivity (only one of treated/control present) and cannot be
    matched."""

    scores: np.ndarray
    excluded_categories: tuple[str, ...]
    converged: bool
    iterations: int


def _sigmoid(eta: np.ndarray) -> np.ndarray:
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    ex = np.exp(eta[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def propensity(categories: Sequence[str], treated: Sequence[bool],
               max_iter: int = 100, tol: float = 1e-8) -> PropensityResult:
    """P(treated | category) by one-hot logistic regression (IRLS).

    With a purely categorical covariate the fitted scores converge to the
    per-category empirical treated fraction; separated categories are
    excluded up front instead of letting the coefficients diverge.
    """
    cats = list(categories)
    y_all = np.asarray(treated, dtype=np.float64)
    if len(cats) != y_all.size:
        raise DataError("categories and treatment flags differ in length")
    if y_all.sum() == 0 or y_all.sum() == y_all.size:
        raise DataError("both treated and control rows are required")

    excluded = []
    for cat in sorted(set(cats)):
        mask = np.asarray([c == cat for c in cats])
        frac = y_all[mask].mean()
        if frac == 0.0 or frac == 1.0:
            excluded.append(cat)
    if excluded:
        logger.warning("propensity: excluding separated categories %s", excluded)

    keep = np.asarray([c not in excluded for c in cats])
    if not keep.any():
        raise DataError("no overlapping categories between treated and control")
    kept_cats = [c for c in cats if c not in excluded]
    y = y_all[keep]

    levels = sorted(set(kept_cats))
    # reference coding: first level is absorbed by the intercept
    X = np.ones((len(kept_cats), len(levels)), dtype=np.float64)
    for j, level in enumerate(levels[1:], start=1):
        X[:, j] = [1.0 if c == level else 0.0 for c in kept_cats]

    beta = np.zeros(X.shape[1])
    ll_prev = -math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        eta = X @ beta
        mu = np.clip(_sigmoid(eta), 1e-12, 1.0 - 1e-12)
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        ll = float(np.sum(y * np.log(mu) + (1.0 - y) * np.log(1.0 - mu)))
        if abs(ll - ll_prev) < tol:
            converged = True
            break
        ll_prev = ll

    fitted = _sigmoid(X @ beta)
    scores = np.full(len(cats), np.nan)
    scores[keep] = fitted
    return PropensityResult(
        scores=scores,
        excluded_categories=tuple(excluded),
        converged=converged,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MatchedSample:
    """Index pairs (treated row, matched control row) into the caller's row
    numbering.  Controls are reused (matching with replacement)."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_treated: tuple[int, ...]


def psm_match(scores: np.ndarray, treated: Sequence[bool]) -> MatchedSample:
    """Nearest-neighbor match on propensity, with replacement.

    Ties break toward the control with the smallest row id; rows with NaN
    scores (positivity violations) are skipped and reported.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(treated, dtype=bool)
    if scores.size != flags.size:
        raise DataError("scores and treatment flags differ in length")
    control_idx = np.flatnonzero(~flags & ~np.isnan(scores))
    if control_idx.size == 0:
        raise DataError("no matchable control rows")
    control_scores = scores[control_idx]
    pairs = []
    unmatched = []
    for i in np.flatnonzero(flags):
        if np.isnan(scores[i]):
            unmatched.append(int(i))
            continue
        # control_idx ascends, so argmin lands on the smallest row id on ties
        j = int(np.argmin(np.abs(control_scores - scores[i])))
        pairs.append((int(i), int(control_idx[j])))
    return MatchedSample(pairs=tuple(pairs), unmatched_treated=tuple(unmatched))
