"""Causally grounded robustness and accuracy ratings for time-series
forecasting models."""

from .core import (
    CausalFrame,
    CausalRow,
    DataError,
    EvalWindow,
    LabeledSeries,
    PredictionRecord,
    ResidualRecord,
    build_causal_frame,
    residuals,
    slide_windows,
)
from .ingest import DatasetManifest, ManifestEntry, load_csv, load_manifest, standardize
from .metrics import (
    MetricError,
    RawScore,
    WrsConfig,
    ape,
    ape_breakdown,
    mase,
    pie_percent,
    sign_accuracy,
    smape,
    wrs,
)
from .perturb import (
    MISSING,
    PerturbationKind,
    SlopeSignSentiment,
    TreatmentDistribution,
    assign_treatments,
    derive_rng,
    is_missing,
)
from .rating import PartialOrder, RatingTable, assign_rating, create_partial_order, rate_metric
from .stats import propensity, psm_match, students_t, t_critical

__version__ = "0.1.0"

__all__ = [
    "CausalFrame", "CausalRow", "DataError", "EvalWindow", "LabeledSeries",
    "PredictionRecord", "ResidualRecord", "build_causal_frame", "residuals",
    "slide_windows", "DatasetManifest", "ManifestEntry", "load_csv",
    "load_manifest", "standardize", "MetricError", "RawScore", "WrsConfig",
    "ape", "ape_breakdown", "mase", "pie_percent", "sign_accuracy", "smape",
    "wrs", "MISSING", "PerturbationKind", "SlopeSignSentiment",
    "TreatmentDistribution", "assign_treatments", "derive_rng", "is_missing",
    "PartialOrder", "RatingTable", "assign_rating", "create_partial_order",
    "rate_metric", "propensity", "psm_match", "students_t", "t_critical",
    "__version__",
]
