"""Experiment specs and the end-to-end run that turns one into a run directory.

A run directory holds::

    resolved-spec.json   spec with every default filled in (enough to rerun)
    constraints.json     ConstraintSet or KL prior used for adaptation
    runrecord.jsonl      one line per epoch, all phases
    *.ckpt               pretrained / regressor / adapted weights
    metrics.csv, metrics.json, summary.json
    size_errors.json     only for runs that train a regressor
    FAILED               only when the run aborted
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bounds import BoundRegime, BoundsError, build_constraints, build_kl_prior, compute_source_stats
from .data import (GenerationError, ManifestError, SliceData, generate_synthetic, load_manifest,
                   resolve_shift, split_by_subject, write_manifest)
from .losses import ConstraintConfigError, ConstraintSet
from .model import CheckpointError, SegmentationModel, SizeRegressor, load_checkpoint, save_checkpoint
from .trainer import (METHODS, AdaptConfig, GridSearchError, RunRecord, TrainingDivergedError, adapt,
                      evaluate, grid_search_gamma, pretrain_source, save_records, size_errors,
                      train_regressor)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CONSTRADAPT_OUTPUT_ROOT"
SPLIT_NAMES = ("source_train", "source_val", "target_train", "target_val", "target_test")
PHASES = ("pretrain", "regressor", "adapt", "evaluate")

EXIT_OK, EXIT_SPEC, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4


class SpecError(ValueError):
    """The experiment spec is malformed or inconsistent."""


class EvaluationError(RuntimeError):
    """Metrics could not be computed."""


DEFAULT_FRACTIONS = {"source": {"train": 0.8, "val": 0.2},
                     "target": {"train": 0.6, "val": 0.2, "test": 0.2}}


@dataclass
class ExperimentSpec:
    dataset: dict
    method: str = "ConstraintAdap"
    config: AdaptConfig = field(default_factory=AdaptConfig)
    grid_search: bool = False
    output_dir: str = "runs"
    name: str | None = None
    pretrained: str | None = None
    regressor: str | None = None
    report: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, raw: dict) -> "ExperimentSpec":
        if not isinstance(raw, dict):
            raise SpecError("spec must be a JSON object")
        unknown = raw.keys() - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        if "dataset" not in raw:
            raise SpecError("spec is missing the 'dataset' block")
        ds = raw["dataset"]
        if not isinstance(ds, dict) or len({"generate", "manifests"} & ds.keys()) != 1:
            raise SpecError("dataset block needs exactly one of 'generate' or 'manifests'")
        method = raw.get("method", "ConstraintAdap")
        cfg = dict(raw.get("config", {}))
        cfg.setdefault("method", method)
        if cfg["method"] != method:
            raise SpecError(f"config.method {cfg['method']!r} disagrees with method {method!r}")
        try:
            config = AdaptConfig(**cfg)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"invalid config: {exc}") from exc
        spec = cls(**{**raw, "config": config})
        spec.dataset = _resolve_dataset(ds)
        return spec

    def to_json(self) -> dict:
        d = asdict(self)
        d["config"] = self.config.to_json()
        return d


def _resolve_dataset(ds: dict) -> dict:
    if "generate" in ds:
        g = dict(ds["generate"])
        required = {"subjects", "slices", "size", "classes", "seed"}
        missing = required - g.keys()
        if missing:
            raise SpecError(f"dataset.generate missing {sorted(missing)}")
        size = g["size"]
        g["size"] = [size, size] if isinstance(size, int) else list(size)
        g.setdefault("shift", "mri_like")
        try:
            resolve_shift(g["shift"])
        except (ValueError, TypeError) as exc:
            raise SpecError(str(exc)) from exc
        g.setdefault("fractions", DEFAULT_FRACTIONS)
        return {"generate": g}
    m = dict(ds["manifests"])
    if "dir" in m:
        base = Path(m.pop("dir"))
        for s in SPLIT_NAMES:
            if (base / f"{s}.json").exists():
                m.setdefault(s, str(base / f"{s}.json"))
    for s in ("source_train", "target_train", "target_val"):
        if s not in m:
            raise SpecError(f"dataset.manifests needs a '{s}' manifest")
    return {"manifests": {k: str(Path(v).resolve()) for k, v in m.items()}}


def load_spec(path) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise SpecError(f"spec file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentSpec.from_json(raw)


# ---------------------------------------------------------------------------
# data

def generate_splits(g: dict):
    """Manifests for every split from a ``dataset.generate`` block."""
    h, w = g["size"]
    src, tgt = generate_synthetic(g["subjects"], g["slices"], h, w, g["classes"], g["shift"], g["seed"])
    out = {}
    for domain, manifest in (("source", src), ("target", tgt)):
        for split, part in split_by_subject(manifest, g["fractions"][domain]).items():
            if len(part):
                out[f"{domain}_{split}"] = part
    return out


def write_splits(splits: dict, out_dir) -> dict[str, Path]:
    return {name: write_manifest(m, out_dir, name) for name, m in splits.items()}


def load_data(spec: ExperimentSpec) -> dict[str, SliceData]:
    ds = spec.dataset
    if "generate" in ds:
        manifests = generate_splits(ds["generate"])
    else:
        manifests = {name: load_manifest(p) for name, p in ds["manifests"].items()}
    data = {name: SliceData(m) for name, m in manifests.items()}
    ks = {d.k for d in data.values()}
    if len(ks) != 1:
        raise SpecError(f"manifests disagree on K: {sorted(ks)}")
    return data


# ---------------------------------------------------------------------------
# run

def output_root(spec: ExperimentSpec) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or spec.output_dir)


def make_run_dir(spec: ExperimentSpec) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = output_root(spec) / f"{stamp}-{spec.name or spec.method}"
    path, n = base, 1
    while path.exists():
        path, n = Path(f"{base}-{n}"), n + 1
    path.mkdir(parents=True)
    return path


def _needs_regressor(spec):
    cfg = spec.config
    return cfg.method == "KLAdap" or (cfg.method == "ConstraintAdap" and cfg.regime.kind == "learned")


def _effective_regime(cfg: AdaptConfig) -> BoundRegime | None:
    if cfg.method == "Constraint_margin":
        r = cfg.regime
        return BoundRegime("oracle_margin", r.margin, r.use_tags, True)
    if cfg.method == "ConstraintAdap":
        return cfg.regime
    return None


@dataclass
class RunResult:
    run_dir: Path
    status: int
    summary: dict = field(default_factory=dict)
    error: str | None = None


def run_experiment(spec: ExperimentSpec, phases=PHASES, run_dir=None) -> RunResult:
    """Execute ``phases`` of ``spec`` and persist every artifact in a fresh run directory."""
    run_dir = Path(run_dir) if run_dir else make_run_dir(spec)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved-spec.json").write_text(json.dumps(spec.to_json(), indent=1))
    try:
        summary = _run(spec, phases, run_dir)
    except (SpecError, BoundsError, ConstraintConfigError, ManifestError, GenerationError,
            CheckpointError, FileNotFoundError) as exc:
        return _fail(run_dir, EXIT_SPEC, exc)
    except (TrainingDivergedError, GridSearchError) as exc:
        return _fail(run_dir, EXIT_TRAIN, exc)
    except EvaluationError as exc:
        return _fail(run_dir, EXIT_EVAL, exc)
    return RunResult(run_dir, EXIT_OK, summary)


def _fail(run_dir, status, exc):
    msg = f"{type(exc).__name__}: {exc}"
    (run_dir / "FAILED").write_text(msg + "\n\n" + traceback.format_exc())
    log.error("run failed (%s): %s", run_dir, msg)
    return RunResult(run_dir, status, error=msg)


def _run(spec: ExperimentSpec, phases, run_dir: Path) -> dict:
    cfg = spec.config
    data = load_data(spec)
    src, tr, tv = data["source_train"], data["target_train"], data["target_val"]
    k = src.k
    records: list[RunRecord] = []
    summary = {"method": cfg.method, "k": k, "seed": cfg.seed, "phases": list(phases),
               "timing": {}}

    torch.manual_seed(cfg.seed)
    if spec.pretrained:
        model = load_checkpoint(spec.pretrained, k=k, arch=SegmentationModel.arch_id)
    else:
        model = SegmentationModel(k, cfg.width)
        if "pretrain" in phases:
            t0 = time.perf_counter()
            model, rec = pretrain_source(model, src, cfg, data.get("source_val"))
            summary["timing"]["pretrain_seconds"] = time.perf_counter() - t0
            records.append(rec)
    if "pretrain" in phases or spec.pretrained:
        save_checkpoint(model, run_dir / "pretrained.ckpt")

    regressor = None
    if "regressor" in phases and _needs_regressor(spec):
        if spec.regressor:
            regressor = load_checkpoint(spec.regressor, k=k, arch=SizeRegressor.arch_id)
        else:
            torch.manual_seed(cfg.seed)
            use_tags = cfg.regime.use_tags
            regressor, rec = train_regressor(SizeRegressor(k), src, tr if use_tags else None,
                                             compute_source_stats(src), cfg, tv)
            records.append(rec)
            summary["regressor"] = {key: v for key, v in rec.final.items()}
        save_checkpoint(regressor, run_dir / "regressor.ckpt")
        rel, absent = size_errors(regressor, tv)
        (run_dir / "size_errors.json").write_text(json.dumps(
            {"relative": rel.tolist(), "absent_estimates": absent.tolist()}))

    if "adapt" in phases:
        constraints = _constraints(cfg, tr, src, regressor)
        if constraints is None:
            (run_dir / "constraints.json").write_text("[]")
        else:
            constraints.save(run_dir / "constraints.json")
        if spec.grid_search and cfg.method not in ("NoAdap", "Oracle"):
            gamma, model, grid = grid_search_gamma(model, src, tr, tv, cfg, constraints)
            rec = grid[gamma]
            summary["grid"] = {str(g): r.best_val_dsc for g, r in grid.items()}
        else:
            gamma = cfg.gamma
            model, rec = adapt(model, src, tr, cfg, constraints, tv)
        records.append(rec)
        summary.update(gamma=gamma, selected_epoch=rec.selected_epoch, val_dsc=rec.best_val_dsc)
        summary["timing"]["seconds_per_batch"] = rec.seconds_per_batch
        save_checkpoint(model, run_dir / "adapted.ckpt")

    save_records(records, run_dir)
    if "evaluate" in phases:
        split = "target_test" if "target_test" in data else "target_val"
        report = evaluate_model(model, data[split])
        report.write_csv(run_dir / "metrics.csv")
        report.write_json(run_dir / "metrics.json")
        summary.update(eval_split=split, dsc=report.overall["dsc"], hd95=report.overall["hd95"])
    (run_dir / "summary.json").write_text(json.dumps(_clean(summary), indent=1))
    return summary


def _constraints(cfg: AdaptConfig, target: SliceData, source: SliceData, regressor):
    if cfg.method in ("NoAdap", "Oracle"):
        return None
    if cfg.method == "KLAdap":
        if regressor is None:
            raise SpecError("KLAdap needs the regressor phase")
        return build_kl_prior(regressor, target, use_tags=cfg.regime.use_tags)
    regime = _effective_regime(cfg)
    stats = compute_source_stats(source) if regime.kind in ("source_stats",) else None
    if regime.kind == "learned" and regressor is None:
        raise SpecError("learned bounds need the regressor phase")
    return build_constraints(regime, target, regressor=regressor, stats=stats)


def evaluate_model(model, data: SliceData):
    try:
        return evaluate(model, data, with_hd=True)
    except Exception as exc:  # metrics failures map to their own exit code
        raise EvaluationError(f"evaluation on {data.domain}/{data.split} failed: {exc}") from exc


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        x = x.item()
    if isinstance(x, float) and math.isnan(x):
        return None
    return x
