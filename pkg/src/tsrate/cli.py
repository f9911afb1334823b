"""Run orchestration and command-line entry points.

A single JSON config declares the dataset, windowing, perturbations,
treatment distributions, model roster and metric parameters.  `run` executes
ingest -> window -> perturb -> forecast -> residuals -> metrics -> ratings
and writes CSV/JSON artifacts; `rate` turns a raw-score table into ratings
without rerunning anything; `images` materializes the spectrogram corpus;
`validate` checks a config and exits.

Exit codes: 0 ok, 2 config error, 3 runtime stage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import core, forecast, imaging, ingest, metrics, perturb
from .core import DataError, EvalWindow, PredictionRecord, ResidualRecord
from .metrics import MetricError, RawScore
from .rating import RatingTable, rate_metric

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
SCHEMA_VERSION = 1

# canonical emission order for the raw-score table
METRIC_ORDER = (
    metrics.WRS_INDUSTRY,
    metrics.WRS_COMPANY,
    "ape_industry",
    "ape_company",
    "pie_industry",
    "pie_company",
    metrics.SMAPE_METRIC,
    metrics.MASE_METRIC,
    metrics.SIGN_ACC_METRIC,
)

HIGHER_IS_BETTER = {metrics.SIGN_ACC_METRIC}


def metric_direction(metric: str) -> str:
    return "higher" if metric in HIGHER_IS_BETTER else "lower"


class ConfigError(ValueError):
    """Invalid run config; carries every detected problem."""

    def __init__(self, problems: Sequence[str] | str):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException | str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


# ---------------------------------------------------------------------------
# config schema
# ---------------------------------------------------------------------------

_REQUIRED = object()


def _check_keys(obj: Mapping, path: str, allowed: set[str], problems: list[str]) -> None:
    for key in sorted(set(obj) - allowed):
        problems.append(f"{path}.{key}: unknown key")


def _get(obj: Mapping, key: str, path: str, typ, problems: list[str], default=_REQUIRED):
    if key not in obj:
        if default is _REQUIRED:
            problems.append(f"{path}.{key}: missing required key")
            return None
        return default
    value = obj[key]
    # bool is an int subclass; never accept it where a number is wanted
    if typ in (int, float, (int, float)) and isinstance(value, bool):
        problems.append(f"{path}.{key}: expected {_type_name(typ)}, got bool")
        return None
    if typ is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, typ):
        problems.append(f"{path}.{key}: expected {_type_name(typ)}, got {type(value).__name__}")
        return None
    return value


def _type_name(typ) -> str:
    if isinstance(typ, tuple):
        return " or ".join(t.__name__ for t in typ)
    return typ.__name__


@dataclass(frozen=True)
class WindowParams:
    n: int = core.DEFAULT_WINDOW
    d: int = core.DEFAULT_HORIZON
    stride: int = core.DEFAULT_HORIZON


@dataclass(frozen=True)
class DistributionSpec:
    name: str
    confounder: str
    favored: str
    weight_ratio: float = 2.0
    seed: int | None = None  # None -> run seed

    def build(self, run_seed: int) -> perturb.TreatmentDistribution:
        return perturb.TreatmentDistribution(
            name=self.name,
            confounder_field=self.confounder,
            favored_value=self.favored,
            weight_ratio=self.weight_ratio,
            seed=self.seed if self.seed is not None else run_seed,
        )


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    model_id: str
    options: tuple[tuple[str, object], ...]  # validated per kind

    def opt(self, key: str, default=None):
        for k, v in self.options:
            if k == key:
                return v
        return default


@dataclass
class RunConfig:
    seed: int
    out_dir: Path
    window: WindowParams
    manifest: ingest.DatasetManifest
    perturbations: tuple[perturb.PerturbationKind, ...]
    distributions: tuple[DistributionSpec, ...]
    models: tuple[ModelSpec, ...]
    l_levels: int
    residual_mode: str
    wrs_config: metrics.WrsConfig
    base_dir: Path
    config_sha256: str

    def tags(self) -> list[str]:
        return [k.tag for k in self.perturbations]

    def kind_for(self, tag: str) -> perturb.PerturbationKind:
        for k in self.perturbations:
            if k.tag == tag:
                return k
        raise KeyError(tag)

    def built_distributions(self) -> list[perturb.TreatmentDistribution]:
        return [d.build(self.seed) for d in self.distributions]


_MODEL_KEYS = {
    "ar_baseline": {"kind", "model_id", "p", "d_diff"},
    "biased": {"kind", "model_id", "offsets", "default_offset"},
    "random": {"kind", "model_id", "seed"},
    "external_csv": {"kind", "model_id", "path", "modality"},
    "http": {"kind", "model_id", "url", "template", "modality", "timeout",
             "attempts", "backoff_base", "secret_env", "auth_header"},
}


def _parse_dataset(obj, path: str, base_dir: Path, problems: list[str]) -> ingest.DatasetManifest | None:
    before = len(problems)
    _check_keys(obj, path, {"date_start", "date_end", "price_column", "series"}, problems)
    start_s = _get(obj, "date_start", path, str, problems, default=None)
    end_s = _get(obj, "date_end", path, str, problems, default=None)
    price_column = _get(obj, "price_column", path, str, problems, default="close")
    series = _get(obj, "series", path, list, problems)
    start = end = None
    for label, text in (("date_start", start_s), ("date_end", end_s)):
        if text is None:
            continue
        try:
            parsed = ingest._parse_date(text)
        except DataError as exc:
            problems.append(f"{path}.{label}: {exc}")
            continue
        if label == "date_start":
            start = parsed
        else:
            end = parsed
    entries = []
    for i, item in enumerate(series or []):
        ipath = f"{path}.series[{i}]"
        if not isinstance(item, dict):
            problems.append(f"{ipath}: expected object")
            continue
        _check_keys(item, ipath, {"path", "company", "industry"}, problems)
        p = _get(item, "path", ipath, str, problems)
        company = _get(item, "company", ipath, str, problems)
        industry = _get(item, "industry", ipath, str, problems)
        if None in (p, company, industry):
            continue
        entries.append(ingest.ManifestEntry(path=base_dir / p, company=company, industry=industry))
    if len(problems) > before:
        return None
    try:
        return ingest.DatasetManifest(
            entries=tuple(entries), date_start=start, date_end=end,
            price_column=price_column,
        )
    except DataError as exc:
        problems.append(f"{path}: {exc}")
        return None


def _parse_perturbations(items, path: str, problems: list[str]) -> tuple[perturb.PerturbationKind, ...]:
    kinds = []
    for i, item in enumerate(items or []):
        ipath = f"{path}[{i}]"
        if not isinstance(item, dict):
            problems.append(f"{ipath}: expected object")
            continue
        _check_keys(item, ipath, {"tag", "period", "phase"}, problems)
        tag = _get(item, "tag", ipath, str, problems)
        period = _get(item, "period", ipath, int, problems, default=None)
        phase = _get(item, "phase", ipath, int, problems, default=0)
        if tag is None:
            continue
        try:
            kinds.append(perturb.PerturbationKind(tag=tag, period=period, phase=phase))
        except perturb.PerturbationError as exc:
            problems.append(f"{ipath}: {exc}")
    tags = [k.tag for k in kinds]
    if len(set(tags)) != len(tags):
        problems.append(f"{path}: duplicate perturbation tags")
    if kinds and "P0" not in tags:
        problems.append(f"{path}: the control P0 must be included")
    return tuple(kinds)


def _parse_distributions(items, path: str, problems: list[str]) -> tuple[DistributionSpec, ...]:
    specs = []
    for i, item in enumerate(items or []):
        ipath = f"{path}[{i}]"
        if not isinstance(item, dict):
            problems.append(f"{ipath}: expected object")
            continue
        _check_keys(item, ipath, {"name", "confounder", "favored", "weight_ratio", "seed"}, problems)
        name = _get(item, "name", ipath, str, problems)
        confounder = _get(item, "confounder", ipath, str, problems)
        favored = _get(item, "favored", ipath, str, problems)
        ratio = _get(item, "weight_ratio", ipath, float, problems, default=2.0)
        seed = _get(item, "seed", ipath, int, problems, default=None)
        if None in (name, confounder, favored):
            continue
        if confounder not in ("company", "industry"):
            problems.append(f"{ipath}.confounder: must be 'company' or 'industry'")
            continue
        if ratio is not None and ratio <= 0:
            problems.append(f"{ipath}.weight_ratio: must be > 0")
            continue
        specs.append(DistributionSpec(name, confounder, favored, ratio, seed))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        problems.append(f"{path}: duplicate distribution names")
    return tuple(specs)


def _parse_models(items, path: str, problems: list[str]) -> tuple[ModelSpec, ...]:
    specs = []
    for i, item in enumerate(items or []):
        ipath = f"{path}[{i}]"
        if not isinstance(item, dict):
            problems.append(f"{ipath}: expected object")
            continue
        kind = _get(item, "kind", ipath, str, problems)
        model_id = _get(item, "model_id", ipath, str, problems)
        if kind is None or model_id is None:
            continue
        if kind not in _MODEL_KEYS:
            problems.append(f"{ipath}.kind: unknown model kind {kind!r}")
            continue
        _check_keys(item, ipath, _MODEL_KEYS[kind], problems)
        opts: dict[str, object] = {}
        if kind == "ar_baseline":
            opts["p"] = _get(item, "p", ipath, int, problems, default=5)
            opts["d_diff"] = _get(item, "d_diff", ipath, int, problems, default=1)
        elif kind == "biased":
            offsets = _get(item, "offsets", ipath, dict, problems, default=None)
            if offsets is not None:
                bad = [k for k, v in offsets.items()
                       if not isinstance(k, str) or isinstance(v, bool)
                       or not isinstance(v, (int, float))]
                if bad:
                    problems.append(f"{ipath}.offsets: non-numeric entries {bad}")
                    offsets = None
                else:
                    offsets = tuple(sorted((k, float(v)) for k, v in offsets.items()))
            opts["offsets"] = offsets
            opts["default_offset"] = _get(item, "default_offset", ipath, float, problems, default=400.0)
        elif kind == "random":
            opts["seed"] = _get(item, "seed", ipath, int, problems, default=None)
        elif kind == "external_csv":
            opts["path"] = _get(item, "path", ipath, str, problems)
            opts["modality"] = _get(item, "modality", ipath, str, problems, default="numeric")
        elif kind == "http":
            opts["url"] = _get(item, "url", ipath, str, problems)
            opts["template"] = _get(item, "template", ipath, str, problems,
                                    default=forecast.HttpForecaster.template)
            opts["modality"] = _get(item, "modality", ipath, str, problems, default="numeric")
            opts["timeout"] = _get(item, "timeout", ipath, float, problems, default=30.0)
            opts["attempts"] = _get(item, "attempts", ipath, int, problems, default=3)
            opts["backoff_base"] = _get(item, "backoff_base", ipath, float, problems, default=1.0)
            opts["secret_env"] = _get(item, "secret_env", ipath, str, problems, default=None)
            opts["auth_header"] = _get(item, "auth_header", ipath, str, problems, default="Authorization")
        modality = opts.get("modality")
        if modality is not None and modality not in ("numeric", "numeric+image"):
            problems.append(f"{ipath}.modality: must be 'numeric' or 'numeric+image'")
            continue
        specs.append(ModelSpec(kind=kind, model_id=model_id,
                               options=tuple(sorted(opts.items(), key=lambda kv: kv[0]))))
    ids = [s.model_id for s in specs]
    if len(set(ids)) != len(ids):
        problems.append(f"{path}: duplicate model ids")
    return tuple(specs)


def load_config(path: str | Path, seed: int | None = None,
                l_levels: int | None = None, out_dir: str | None = None) -> RunConfig:
    """Parse and structurally validate a run config; unknown keys fail."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}")
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})")
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")

    problems: list[str] = []
    _check_keys(obj, "$", {"version", "seed", "out_dir", "window", "dataset",
                           "perturbations", "distributions", "models", "metrics"}, problems)
    version = _get(obj, "version", "$", int, problems)
    if version is not None and version != SCHEMA_VERSION:
        problems.append(f"$.version: unsupported schema version {version} (expected {SCHEMA_VERSION})")
    cfg_seed = _get(obj, "seed", "$", int, problems, default=0)
    cfg_out = _get(obj, "out_dir", "$", str, problems, default="out")

    wobj = _get(obj, "window", "$", dict, problems, default={})
    window = WindowParams()
    if wobj is not None:
        _check_keys(wobj, "$.window", {"n", "d", "stride"}, problems)
        n = _get(wobj, "n", "$.window", int, problems, default=core.DEFAULT_WINDOW)
        d = _get(wobj, "d", "$.window", int, problems, default=core.DEFAULT_HORIZON)
        stride = _get(wobj, "stride", "$.window", int, problems, default=None)
        if stride is None:
            stride = d if d is not None else core.DEFAULT_HORIZON
        if n is not None and d is not None:
            for label, value in (("n", n), ("d", d), ("stride", stride)):
                if value < 1:
                    problems.append(f"$.window.{label}: must be >= 1")
            window = WindowParams(n=n, d=d, stride=stride)

    dobj = _get(obj, "dataset", "$", dict, problems)
    manifest = None
    if dobj is not None:
        manifest = _parse_dataset(dobj, "$.dataset", path.parent, problems)

    perts = _parse_perturbations(_get(obj, "perturbations", "$", list, problems), "$.perturbations", problems)
    dists = _parse_distributions(_get(obj, "distributions", "$", list, problems, default=[]), "$.distributions", problems)
    models = _parse_models(_get(obj, "models", "$", list, problems), "$.models", problems)
    if not models:
        problems.append("$.models: at least one model is required")
    if not perts:
        problems.append("$.perturbations: at least the control P0 is required")

    mobj = _get(obj, "metrics", "$", dict, problems, default={})
    l_cfg = 3
    residual_mode = "absolute"
    wrs_config = metrics.WrsConfig()
    if mobj is not None:
        _check_keys(mobj, "$.metrics", {"l_levels", "residual_mode", "wrs"}, problems)
        l_cfg = _get(mobj, "l_levels", "$.metrics", int, problems, default=3)
        residual_mode = _get(mobj, "residual_mode", "$.metrics", str, problems, default="absolute")
        if residual_mode not in ("absolute", "signed", None):
            problems.append("$.metrics.residual_mode: must be 'absolute' or 'signed'")
        wobj2 = _get(mobj, "wrs", "$.metrics", dict, problems, default=None)
        if wobj2 is not None:
            _check_keys(wobj2, "$.metrics.wrs", {"cis", "weights"}, problems)
            cis = _get(wobj2, "cis", "$.metrics.wrs", list, problems, default=[95, 75, 60])
            weights = _get(wobj2, "weights", "$.metrics.wrs", list, problems, default=[1.0, 0.8, 0.6])
            try:
                wrs_config = metrics.WrsConfig(cis=tuple(cis), weights=tuple(weights))
            except (MetricError, TypeError) as exc:
                problems.append(f"$.metrics.wrs: {exc}")

    effective_l = l_levels if l_levels is not None else l_cfg
    if effective_l is None or effective_l < 1:
        problems.append("$.metrics.l_levels: must be >= 1")

    if problems:
        raise ConfigError(problems)

    return RunConfig(
        seed=seed if seed is not None else cfg_seed,
        out_dir=Path(out_dir) if out_dir is not None else path.parent / cfg_out,
        window=window,
        manifest=manifest,
        perturbations=perts,
        distributions=dists,
        models=models,
        l_levels=effective_l,
        residual_mode=residual_mode,
        wrs_config=wrs_config,
        base_dir=path.parent,
        config_sha256=hashlib.sha256(raw).hexdigest(),
    )


def validate_config(config: RunConfig) -> list[str]:
    """Cross-checks needing the filesystem: referenced files must exist."""
    problems = []
    for e in config.manifest.entries:
        if not Path(e.path).exists():
            problems.append(f"dataset file not found: {e.path}")
    for spec in config.models:
        if spec.kind == "external_csv":
            p = config.base_dir / str(spec.opt("path"))
            if not p.exists():
                problems.append(f"prediction file not found: {p}")
    companies = {e.company for e in config.manifest.entries}
    industries = set(config.manifest.industries())
    for d in config.distributions:
        pool = companies if d.confounder == "company" else industries
        if d.favored not in pool:
            problems.append(
                f"distribution {d.name}: favored {d.confounder} {d.favored!r} not in dataset"
            )
    return problems


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

@dataclass
class TablePredictor:
    """External model backed by a prediction-exchange CSV."""

    model_id: str
    table: Mapping[tuple[str, str], tuple[float, ...]]
    modality: str = "numeric"
    consumes_images: bool = False
    rejects: tuple[tuple[int, str], ...] = ()

    def lookup(self, window_id: str, tag: str) -> tuple[float, ...] | None:
        return self.table.get((window_id, tag))


def build_models(config: RunConfig, series_list, window_ids: set[str]) -> list:
    ranges = forecast.company_ranges(series_list)
    out = []
    for spec in config.models:
        if spec.kind == "ar_baseline":
            out.append(forecast.ArBaseline(model_id=spec.model_id,
                                           p=spec.opt("p", 5), d_diff=spec.opt("d_diff", 1)))
        elif spec.kind == "biased":
            offsets = spec.opt("offsets")
            kwargs = {} if offsets is None else {"offsets": dict(offsets)}
            out.append(forecast.BiasedSystem(model_id=spec.model_id,
                                             default_offset=spec.opt("default_offset", 400.0),
                                             **kwargs))
        elif spec.kind == "random":
            seed = spec.opt("seed")
            out.append(forecast.RandomSystem(ranges=ranges,
                                             seed=seed if seed is not None else config.seed,
                                             model_id=spec.model_id))
        elif spec.kind == "external_csv":
            path = config.base_dir / str(spec.opt("path"))
            report = forecast.load_external_predictions(path, config.window.d, window_ids)
            for lineno, reason in report.rejects:
                logger.warning("%s:%s: rejected row (%s)", path, lineno, reason)
            table = {
                (r.window_id, r.perturbation): r.prediction
                for r in report.records if r.model_id == spec.model_id
            }
            out.append(TablePredictor(model_id=spec.model_id, table=table,
                                      modality=str(spec.opt("modality", "numeric")),
                                      rejects=report.rejects))
        elif spec.kind == "http":
            headers = {}
            secret_env = spec.opt("secret_env")
            if secret_env is not None:
                token = os.environ.get(str(secret_env))
                if token is None:
                    raise StageError("models", f"env var {secret_env!r} for {spec.model_id} is not set")
                headers[str(spec.opt("auth_header", "Authorization"))] = token
            out.append(forecast.HttpForecaster(
                model_id=spec.model_id,
                url=str(spec.opt("url")),
                d=config.window.d,
                template=str(spec.opt("template")),
                headers=headers,
                timeout=spec.opt("timeout", 30.0),
                attempts=spec.opt("attempts", 3),
                backoff_base=spec.opt("backoff_base", 1.0),
                modality=str(spec.opt("modality", "numeric")),
            ))
        else:  # unreachable after parsing
            raise StageError("models", f"unknown model kind {spec.kind!r}")
    return out


def tags_for(model, config: RunConfig) -> list[str]:
    """Numeric-only models run the numeric tags; multimodal models run all."""
    if model.modality == "numeric+image":
        return config.tags()
    return [t for t in config.tags() if t in perturb.NUMERIC_TAGS]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    windows: list[EvalWindow]
    predictions: list[PredictionRecord]
    residual_records: list[ResidualRecord]
    frame: core.CausalFrame
    raw_scores: list[RawScore]
    tables: dict[str, RatingTable]
    radar: dict
    trace: dict
    skipped_cells: dict[str, int]


def build_base_images(windows: Sequence[EvalWindow]) -> dict[str, np.ndarray]:
    out = {}
    for w in windows:
        std = ingest.standardize(w.history_array)
        spec = imaging.cwt(std, imaging.default_scales(len(std)))
        out[w.window_id] = imaging.compose_image(spec, std).raster
    return out


def _predict_cell(model, tag: str, config: RunConfig, windows: Sequence[EvalWindow],
                  base_images: Mapping[str, np.ndarray],
                  provider: perturb.SentimentProvider) -> tuple[list[PredictionRecord], int]:
    kind = config.kind_for(tag)
    records: list[PredictionRecord] = []
    skipped = 0
    for w in windows:
        if hasattr(model, "lookup"):
            pred = model.lookup(w.window_id, tag)
            if pred is None:
                skipped += 1
                continue
            records.append(PredictionRecord(w.window_id, model.model_id, tag, pred))
            continue
        history: Sequence = w.history
        image = None
        if getattr(model, "consumes_images", False):
            # numeric tags leave the image at the unperturbed base
            image = perturb.apply_image(kind, base_images[w.window_id], provider,
                                        w.history)
        if kind.touches_numeric:
            history = perturb.apply_numeric(kind, w.history)
        values = model.predict(w, history, image=image)
        records.append(PredictionRecord(w.window_id, model.model_id, tag, tuple(values)))
    return records, skipped


def run_pipeline(config: RunConfig, jobs: int = 1) -> RunResult:
    try:
        series_list = ingest.load_manifest(config.manifest)
    except DataError as exc:
        raise StageError("ingest", exc) from exc

    try:
        windows: list[EvalWindow] = []
        for s in series_list:
            windows.extend(core.slide_windows(s, config.window.n, config.window.d,
                                              config.window.stride))
        windows.sort(key=lambda w: w.window_id)
        if not windows:
            raise StageError("window", "no evaluation windows (series too short?)")
        labels = core.label_index(windows)
    except DataError as exc:
        raise StageError("window", exc) from exc

    window_by_id = {w.window_id: w for w in windows}
    models = build_models(config, series_list, set(window_by_id))

    provider = perturb.SlopeSignSentiment()
    needs_images = any(getattr(m, "consumes_images", False) for m in models)
    try:
        base_images = build_base_images(windows) if needs_images else {}
    except (DataError, ValueError) as exc:
        raise StageError("images", exc) from exc

    cells = [(m, t) for m in models for t in tags_for(m, config)]
    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                results = list(ex.map(
                    lambda cell: _predict_cell(cell[0], cell[1], config, windows,
                                               base_images, provider),
                    cells,
                ))
        else:
            results = [_predict_cell(m, t, config, windows, base_images, provider)
                       for m, t in cells]
    except (forecast.ForecastError, perturb.PerturbationError, DataError) as exc:
        raise StageError("forecast", exc) from exc

    predictions: list[PredictionRecord] = []
    skipped_cells: dict[str, int] = {}
    for (model, tag), (records, skipped) in zip(cells, results):
        predictions.extend(records)
        if skipped:
            key = f"{model.model_id}/{tag}"
            skipped_cells[key] = skipped
            logger.warning("cell %s: %d windows without predictions", key, skipped)

    try:
        residual_records = [
            core.residuals(rec, window_by_id[rec.window_id], mode=config.residual_mode)
            for rec in predictions
        ]
        frame = core.build_causal_frame(residual_records, labels)
    except DataError as exc:
        raise StageError("residuals", exc) from exc

    try:
        raw_scores, radar, trace = compute_scores(config, models, windows, frame,
                                                  window_by_id, predictions,
                                                  residual_records)
    except MetricError as exc:
        raise StageError("metrics", exc) from exc

    try:
        tables = {}
        for metric in METRIC_ORDER:
            if any(s.metric == metric for s in raw_scores):
                tables[metric] = rate_metric(metric, raw_scores, config.l_levels,
                                             direction=metric_direction(metric))
    except Exception as exc:
        raise StageError("rating", exc) from exc

    return RunResult(windows=windows, predictions=predictions,
                     residual_records=residual_records, frame=frame,
                     raw_scores=raw_scores, tables=tables, radar=radar,
                     trace=trace, skipped_cells=skipped_cells)


def compute_scores(config: RunConfig, models, windows, frame, window_by_id,
                   predictions, residual_records) -> tuple[list[RawScore], dict, dict]:
    raw_scores: list[RawScore] = []
    radar: dict = {}
    trace: dict = {}

    by_cell: dict[tuple[str, str], list[PredictionRecord]] = {}
    for rec in predictions:
        by_cell.setdefault((rec.model_id, rec.perturbation), []).append(rec)
    residual_by = {(r.window_id, r.model_id, r.perturbation): r
                   for r in residual_records}

    def put(score: RawScore, window_ids: list[str], distribution: str | None = None,
            std: float | None = None) -> None:
        raw_scores.append(score)
        entry = radar.setdefault(score.metric, {}).setdefault(
            score.model_id, {"cells": {}, "average": None})
        entry["cells"][score.perturbation] = {"mean": score.value, "std": std}
        trace[f"{score.metric}|{score.model_id}|{score.perturbation}"] = {
            "confounder": score.confounder or None,
            "distribution": distribution,
            "window_ids": sorted(window_ids),
        }

    # statistical bias over the exhaustive lane
    for group_field, metric in (("industry", metrics.WRS_INDUSTRY),
                                ("company", metrics.WRS_COMPANY)):
        for model in models:
            for tag in tags_for(model, config):
                try:
                    score = metrics.wrs(frame, model.model_id, tag,
                                        group_field=group_field, config=config.wrs_config)
                except MetricError as exc:
                    logger.warning("wrs_%s %s/%s skipped: %s", group_field,
                                   model.model_id, tag, exc)
                    continue
                cell = by_cell.get((model.model_id, tag), [])
                put(score, [r.window_id for r in cell])

    # causal effects over the assignment lane
    dists = config.built_distributions()
    for confounder in ("industry", "company"):
        picked = [d for d in dists if d.confounder_field == confounder]
        if not picked:
            continue
        for model in models:
            mtags = tags_for(model, config)
            best: dict[str, dict[str, tuple]] = {"ape": {}, "pie": {}}
            for dist in picked:
                values = [getattr(w, confounder) for w in windows]
                try:
                    assigned = perturb.assign_treatments(values, dist, tags=mtags)
                except perturb.PerturbationError as exc:
                    logger.warning("%s skipped for %s: %s", dist.name, model.model_id, exc)
                    continue
                rows = []
                used: list[tuple[str, str]] = []
                for w, tag in zip(windows, assigned):
                    rec = residual_by.get((w.window_id, model.model_id, tag))
                    if rec is None:
                        continue
                    rows.append(rec)
                    used.append((w.window_id, tag))
                sub = core.build_causal_frame(rows, core.label_index(windows))
                for tag in sorted(set(assigned) - {metrics.CONTROL_TAG}):
                    try:
                        b = metrics.ape_breakdown(sub, model.model_id, tag, confounder)
                    except MetricError as exc:
                        logger.warning("ape %s/%s under %s skipped: %s",
                                       model.model_id, tag, dist.name, exc)
                        continue
                    wids = [wid for wid, t in used if t in (tag, metrics.CONTROL_TAG)]
                    pie_val = abs(b.ape_observational - b.ape_matched) * 100.0
                    prev = best["ape"].get(tag)
                    if prev is None or b.ape_matched > prev[0]:
                        best["ape"][tag] = (b.ape_matched, dist.name, wids)
                    prev = best["pie"].get(tag)
                    if prev is None or pie_val > prev[0]:
                        best["pie"][tag] = (pie_val, dist.name, wids)
            for kind_name in ("ape", "pie"):
                for tag in sorted(best[kind_name]):
                    value, dist_name, wids = best[kind_name][tag]
                    put(RawScore(metric=f"{kind_name}_{confounder}",
                                 model_id=model.model_id, perturbation=tag,
                                 confounder=confounder, value=value),
                        wids, distribution=dist_name)

    # accuracy over the exhaustive lane
    for model in models:
        for tag in tags_for(model, config):
            cell = sorted(by_cell.get((model.model_id, tag), []),
                          key=lambda r: r.window_id)
            if not cell:
                continue
            smapes, mases, signs = [], [], []
            for rec in cell:
                w = window_by_id[rec.window_id]
                smapes.append(metrics.smape(w.truth, rec.prediction))
                try:
                    mases.append(metrics.mase(w.history, w.truth, rec.prediction))
                except MetricError:
                    pass  # constant history window: no naive scale
                signs.append(100.0 * metrics.sign_accuracy(
                    w.truth, rec.prediction, anchor=w.history[-1]))
            wids = [r.window_id for r in cell]
            for metric, series in ((metrics.SMAPE_METRIC, smapes),
                                   (metrics.MASE_METRIC, mases),
                                   (metrics.SIGN_ACC_METRIC, signs)):
                if not series:
                    continue
                arr = np.asarray(series, dtype=np.float64)
                put(RawScore(metric=metric, model_id=model.model_id,
                             perturbation=tag, confounder="", value=float(arr.mean())),
                    wids, std=float(arr.std()))

    # cross-perturbation average per metric x model (the radar "average" cell)
    for per_model in radar.values():
        for entry in per_model.values():
            entry["average"] = float(np.mean([c["mean"] for c in entry["cells"].values()]))
    return raw_scores, radar, trace


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def write_artifacts(result: RunResult, config: RunConfig, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = core.label_index(result.windows)

    _write_csv(out_dir / "windows.csv", ["window_id", "company", "industry"],
               [[w.window_id, w.company, w.industry] for w in result.windows])
    forecast.export_predictions(result.predictions, out_dir / "predictions.csv",
                                config.window.d)
    _write_csv(out_dir / "residuals.csv",
               ["window_id", "model_id", "perturbation", "company", "industry",
                "max_residual"],
               [[r.window_id, r.model_id, r.perturbation, labels[r.window_id][0],
                 labels[r.window_id][1], repr(r.max_residual)]
                for r in result.residual_records])
    _write_csv(out_dir / "raw_scores.csv",
               ["metric", "model_id", "perturbation", "confounder", "value"],
               [[s.metric, s.model_id, s.perturbation, s.confounder, repr(s.value)]
                for s in result.raw_scores])

    orders = {
        metric: {p: [[e.model_id, e.value] for e in po.entries]
                 for p, po in table.orders.items()}
        for metric, table in result.tables.items()
    }
    _dump_json(out_dir / "partial_orders.json", orders)

    ratings = {
        metric: {
            "direction": table.direction,
            "levels": config.l_levels,
            "ratings": {p: dict(sorted(r.items())) for p, r in table.ratings.items()},
            "ascending_ratings": {p: dict(sorted(r.items()))
                                  for p, r in table.ascending_ratings.items()},
        }
        for metric, table in result.tables.items()
    }
    _dump_json(out_dir / "ratings.json", ratings)
    _dump_json(out_dir / "radar.json", result.radar)

    artifact_names = ["windows.csv", "predictions.csv", "residuals.csv",
                      "raw_scores.csv", "partial_orders.json", "ratings.json",
                      "radar.json"]
    manifest = {
        "tool_version": TOOL_VERSION,
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "l_levels": config.l_levels,
        "residual_mode": config.residual_mode,
        "config_sha256": config.config_sha256,
        "artifacts": {
            name: hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
            for name in artifact_names
        },
        "counts": {
            "windows": len(result.windows),
            "predictions": len(result.predictions),
            "raw_scores": len(result.raw_scores),
            "skipped_cells": result.skipped_cells,
        },
        "trace": result.trace,
    }
    _dump_json(out_dir / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _load_validated(args) -> RunConfig:
    config = load_config(args.config, seed=args.seed, l_levels=args.l_levels,
                         out_dir=args.out)
    problems = validate_config(config)
    if problems:
        raise ConfigError(problems)
    return config


def cmd_validate(args) -> int:
    try:
        _load_validated(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    print("OK")
    return 0


def cmd_run(args) -> int:
    try:
        config = _load_validated(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    try:
        result = run_pipeline(config, jobs=args.jobs)
        manifest = write_artifacts(result, config, config.out_dir)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {len(manifest['artifacts']) + 1} artifacts to {config.out_dir}")
    print(f"windows={manifest['counts']['windows']} "
          f"predictions={manifest['counts']['predictions']} "
          f"raw_scores={manifest['counts']['raw_scores']}")
    return 0


def read_scores_csv(path: str | Path) -> list[RawScore]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scores file not found: {path}")
    scores = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["metric", "model_id", "perturbation", "confounder", "value"]:
            raise ConfigError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ConfigError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            try:
                value = float(row[4])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value {row[4]!r}")
            try:
                scores.append(RawScore(metric=row[0], model_id=row[1],
                                       perturbation=row[2], confounder=row[3],
                                       value=value))
            except MetricError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}")
    if not scores:
        raise ConfigError(f"{path}: no score rows")
    return scores


def cmd_rate(args) -> int:
    try:
        scores = read_scores_csv(args.scores)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    levels = args.l_levels if args.l_levels is not None else 3
    tables = {}
    try:
        for metric in sorted({s.metric for s in scores}):
            direction = (metric_direction(metric) if args.direction == "auto"
                         else args.direction)
            tables[metric] = rate_metric(metric, scores, levels, direction=direction)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    for metric, table in sorted(tables.items()):
        for p in sorted(table.ratings):
            cells = " ".join(f"{m}={r}" for m, r in sorted(table.ratings[p].items()))
            print(f"{metric} {p}: {cells}")
    if args.out is not None:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            metric: {
                "direction": table.direction,
                "levels": levels,
                "ratings": {p: dict(sorted(r.items())) for p, r in table.ratings.items()},
                "ascending_ratings": {p: dict(sorted(r.items()))
                                      for p, r in table.ascending_ratings.items()},
            }
            for metric, table in tables.items()
        }
        _dump_json(out_dir / "ratings.json", payload)
        _dump_json(out_dir / "partial_orders.json", {
            metric: {p: [[e.model_id, e.value] for e in po.entries]
                     for p, po in table.orders.items()}
            for metric, table in tables.items()
        })
    return 0


def cmd_images(args) -> int:
    try:
        config = _load_validated(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    try:
        series_list = ingest.load_manifest(config.manifest)
        windows: list[EvalWindow] = []
        for s in series_list:
            windows.extend(core.slide_windows(s, config.window.n, config.window.d,
                                              config.window.stride))
        windows.sort(key=lambda w: w.window_id)
        out_dir = config.out_dir / "images" if args.out is None else Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        provider = perturb.SlopeSignSentiment()
        image_tags = [t for t in config.tags() if t in perturb.IMAGE_TAGS]
        count = 0
        for w in windows:
            std = ingest.standardize(w.history_array)
            spec = imaging.cwt(std, imaging.default_scales(len(std)))
            base = imaging.compose_image(spec, std).raster
            for tag in image_tags:
                kind = config.kind_for(tag)
                raster = perturb.apply_image(kind, base, provider, w.history)
                imaging.save_png(raster, out_dir / f"{w.window_id}_{tag}.png")
                count += 1
            imaging.save_png(imaging.render_lineplot(w.history_array),
                             out_dir / f"{w.window_id}_line.png")
            count += 1
    except (DataError, perturb.PerturbationError, ValueError, OSError) as exc:
        print(f"error: images stage failed: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {count} images to {out_dir}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="tsrate",
        description="Causally grounded robustness and accuracy ratings for "
                    "time-series forecasting models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--l-levels", type=int, default=None, help="rating levels L")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers")

    p_validate = sub.add_parser("validate", help="check a run config")
    add_common(p_validate)
    p_validate.set_defaults(func=cmd_validate)

    p_run = sub.add_parser("run", help="execute the full pipeline")
    add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_rate = sub.add_parser("rate", help="rate a raw-score table")
    p_rate.add_argument("scores", help="raw-score CSV (metric,model_id,perturbation,confounder,value)")
    p_rate.add_argument("--out", default=None)
    p_rate.add_argument("--l-levels", type=int, default=None)
    p_rate.add_argument("--direction", choices=("lower", "higher", "auto"), default="auto")
    p_rate.set_defaults(func=cmd_rate)

    p_images = sub.add_parser("images", help="write the spectrogram/line-plot corpus")
    add_common(p_images)
    p_images.set_defaults(func=cmd_images)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
