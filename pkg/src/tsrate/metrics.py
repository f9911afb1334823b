"""Evaluation metrics.

Robustness side: WRS (weighted rejection score over group pairs), APE
(deconfounded mean effect of a perturbation via propensity matching) and
PIE% (gap between observational and deconfounded effects).  Accuracy side:
SMAPE, MASE and sign accuracy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import CausalFrame, DataError
from .stats import propensity, psm_match, students_t, t_critical

WRS_INDUSTRY = "wrs_industry"
WRS_COMPANY = "wrs_company"
APE_METRIC = "ape"
PIE_METRIC = "pie"
SMAPE_METRIC = "smape"
MASE_METRIC = "mase"
SIGN_ACC_METRIC = "sign_accuracy"

CONTROL_TAG = "P0"


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class WrsConfig:
    cis: tuple[float, ...] = (95.0, 75.0, 60.0)
    weights: tuple[float, ...] = (1.0, 0.8, 0.6)

    def __post_init__(self) -> None:
        object.__setattr__(self, "cis", tuple(float(c) for c in self.cis))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.cis) != len(self.weights):
            raise MetricError("cis and weights must have equal length")
        if any(w <= 0 for w in self.weights):
            raise MetricError("weights must be positive")
        if any(not 0.0 < c < 100.0 for c in self.cis):
            raise MetricError("confidence levels must be in (0, 100)")


@dataclass(frozen=True)
class RawScore:
    metric: str
    model_id: str
    perturbation: str
    confounder: str  # company | industry | none
    value: float

    def __post_init__(self) -> None:
        if math.isnan(self.value):
            raise MetricError(
                f"raw score {self.metric}/{self.model_id}/{self.perturbation} is NaN"
            )


# ---------------------------------------------------------------------------
# WRS
# ---------------------------------------------------------------------------

def _pair_rejections(groups: dict[str, np.ndarray], config: WrsConfig) -> float:
    keys = sorted(groups)
    for k in keys:
        if groups[k].size < 2:
            raise MetricError(f"group {k!r} has fewer than 2 rows")
    total = 0.0
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            res = students_t(groups[keys[i]], groups[keys[j]])
            # accumulate in declared CI order; reordering changes the float sum
            for ci, w in zip(config.cis, config.weights):
                if abs(res.t) > t_critical(ci, res.dof):
                    total += w
    return total


def wrs(frame: CausalFrame, model_id: str, perturbation: str,
        group_field: str = "industry", config: WrsConfig | None = None) -> RawScore:
    """Weighted count of t-test rejections over group pairs of R^max samples.

    group_field 'industry' tests every industry pair; 'company' tests company
    pairs within each industry and sums across industries (pairs never span
    industries, which would conflate the two bias notions).
    """
    config = config or WrsConfig()
    sub = frame.filter(model_id=model_id, perturbation=perturbation)
    if len(sub) == 0:
        raise MetricError(f"no rows for {model_id}/{perturbation}")
    if group_field == "industry":
        groups = sub.residuals_by("industry")
        if len(groups) < 2:
            raise MetricError("need at least 2 industries")
        value = _pair_rejections(groups, config)
        confounder = "industry"
    elif group_field == "company":
        value = 0.0
        pair_count = 0
        for _, indframe in sorted(sub.industries().items()):
            groups = indframe.residuals_by("company")
            if len(groups) < 2:
                continue
            pair_count += len(groups) * (len(groups) - 1) // 2
            value += _pair_rejections(groups, config)
        if pair_count == 0:
            raise MetricError("no industry contains 2 companies with rows")
        confounder = "company"
    else:
        raise MetricError(f"unknown group field {group_field!r}")
    return RawScore(
        metric=f"wrs_{confounder}",
        model_id=model_id,
        perturbation=perturbation,
        confounder=confounder,
        value=value,
    )


# ---------------------------------------------------------------------------
# APE / PIE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ApeBreakdown:
    """Deconfounded and observational effect estimates for one perturbation.

    ape_matched is the ATT from propensity-matched pairs; ape_signed keeps
    its direction for diagnosis; ape_observational is the raw group-mean gap.
    """

    model_id: str
    perturbation: str
    confounder: str
    ape_matched: float
    ape_signed: float
    ape_observational: float
    observational_signed: float
    matched_pairs: int
    excluded_categories: tuple[str, ...]


def _causal_arrays(frame: CausalFrame, model_id: str, perturbation: str,
                   confounder: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    if confounder not in ("company", "industry"):
        raise MetricError(f"unknown confounder field {confounder!r}")
    cats: list[str] = []
    flags: list[bool] = []
    outcomes: list[float] = []
    for row in frame.rows:
        if row.model_id != model_id or row.perturbation not in (perturbation, CONTROL_TAG):
            continue
        cats.append(getattr(row, confounder))
        flags.append(row.perturbation == perturbation)
        outcomes.append(row.max_residual)
    flags_arr = np.asarray(flags, dtype=bool)
    if not flags_arr.any():
        raise MetricError(f"no rows under {perturbation} for {model_id}")
    if flags_arr.all():
        raise MetricError(f"no control ({CONTROL_TAG}) rows for {model_id}")
    return cats, flags_arr, np.asarray(outcomes, dtype=np.float64)


def ape_breakdown(frame: CausalFrame, model_id: str, perturbation: str,
                  confounder: str) -> ApeBreakdown:
    if perturbation == CONTROL_TAG:
        raise MetricError("APE compares a perturbation against the control")
    cats, flags, outcomes = _causal_arrays(frame, model_id, perturbation, confounder)
    obs_signed = float(outcomes[flags].mean() - outcomes[~flags].mean())
    try:
        prop = propensity(cats, flags)
        matched = psm_match(prop.scores, flags)
    except DataError as exc:
        raise MetricError(f"matching failed for {model_id}/{perturbation}: {exc}") from exc
    if not matched.pairs:
        raise MetricError(f"no matchable treated rows for {model_id}/{perturbation}")
    t_idx = np.asarray([p[0] for p in matched.pairs])
    c_idx = np.asarray([p[1] for p in matched.pairs])
    signed = float(outcomes[t_idx].mean() - outcomes[c_idx].mean())
    return ApeBreakdown(
        model_id=model_id,
        perturbation=perturbation,
        confounder=confounder,
        ape_matched=abs(signed),
        ape_signed=signed,
        ape_observational=abs(obs_signed),
        observational_signed=obs_signed,
        matched_pairs=len(matched.pairs),
        excluded_categories=prop.excluded_categories,
    )


def ape(frame: CausalFrame, model_id: str, perturbation: str,
        confounder: str) -> RawScore:
    """Deconfounded |E[R^max | do(P=p)] - E[R^max | do(P=0)]| via matching."""
    b = ape_breakdown(frame, model_id, perturbation, confounder)
    return RawScore(
        metric=f"ape_{confounder}",
        model_id=model_id,
        perturbation=perturbation,
        confounder=confounder,
        value=b.ape_matched,
    )


def pie_percent(frame: CausalFrame, model_id: str, perturbation: str,
                confounder: str) -> RawScore:
    """Confounding gap: | |APE_obs| - |APE_matched| | * 100."""
    b = ape_breakdown(frame, model_id, perturbation, confounder)
    value = abs(b.ape_observational - b.ape_matched) * 100.0
    return RawScore(
        metric=f"pie_{confounder}",
        model_id=model_id,
        perturbation=perturbation,
        confounder=confounder,
        value=value,
    )


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------

def smape(truth: Sequence[float], prediction: Sequence[float]) -> float:
    """Symmetric mean absolute percentage error, range [0, 2].

    A step where truth and prediction are both exactly zero contributes 0
    (the perfect-forecast limit).
    """
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(prediction, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise MetricError("truth and prediction must be equal-length 1-d vectors")
    denom = (np.abs(x) + np.abs(y)) / 2.0
    terms = np.where(denom == 0.0, 0.0, np.abs(x - y) / np.where(denom == 0.0, 1.0, denom))
    return float(terms.mean())


def mase(train: Sequence[float], truth: Sequence[float],
         prediction: Sequence[float]) -> float:
    """Forecast MAE scaled by the naive one-step MAE on the training history."""
    h = np.asarray(train, dtype=np.float64)
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(prediction, dtype=np.float64)
    if h.size < 2:
        raise MetricError("training history needs at least 2 values")
    if x.shape != y.shape or x.size == 0:
        raise MetricError("truth and prediction must be equal-length vectors")
    denom = float(np.abs(np.diff(h)).mean())
    if denom == 0.0:
        raise MetricError("constant training series: naive denominator is zero")
    return float(np.abs(x - y).mean() / denom)


def sign_accuracy(truth: Sequence[float], prediction: Sequence[float],
                  anchor: float) -> float:
    """Fraction of steps whose predicted move direction matches the truth.

    Both series difference against the same anchor (the last history value)
    at the first step; sign(0) counts as its own direction and must match
    exactly.
    """
    x = np.asarray(truth, dtype=np.float64)
    y = np.asarray(prediction, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size == 0:
        raise MetricError("truth and prediction must be equal-length 1-d vectors")
    a = float(anchor)
    dx = np.sign(np.diff(np.concatenate(([a], x))))
    dy = np.sign(np.diff(np.concatenate(([a], y))))
    return float((dx == dy).mean())
