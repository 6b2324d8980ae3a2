"""Desk-scale reproduction protocol on synthetic shifted data.

One call to :func:`run_benchmark` generates a dataset for a seed, pretrains a
single source model and adapts copies of it with every requested method.
"""
from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import torch

from .bounds import BoundRegime, build_constraints, build_kl_prior, compute_source_stats
from .data import SliceData, generate_synthetic, split_by_subject
from .model import SegmentationModel, SizeRegressor
from .trainer import AdaptConfig, adapt, evaluate, pretrain_source, train_regressor

# Method label -> (trainer method, bound regime or None, gamma)
METHOD_TABLE = {
    "NoAdap": ("NoAdap", None),
    "Oracle": ("Oracle", None),
    "Constraint10": ("Constraint_margin", BoundRegime("oracle_margin", 0.10, True, True)),
    "Constraint25": ("Constraint_margin", BoundRegime("oracle_margin", 0.25, True, True)),
    "Constraint50": ("Constraint_margin", BoundRegime("oracle_margin", 0.50, True, True)),
    "Constraint75": ("Constraint_margin", BoundRegime("oracle_margin", 0.75, True, True)),
    "ConstraintAdap": ("ConstraintAdap", BoundRegime("learned", 0.10, True)),
    "ConstraintAdapNoTag": ("ConstraintAdap", BoundRegime("learned", 0.10, False)),
    "ConstraintLit": ("ConstraintAdap", BoundRegime("source_stats", 0.10, True)),
    "KLAdap": ("KLAdap", None),
    "KLAdapNoTag": ("KLAdap", None),
}


@dataclass
class BenchmarkSpec:
    subjects: int = 10
    slices: int = 20
    size: int = 32
    k: int = 2
    shift: str = "mri_like"
    source_fractions: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.2})
    target_fractions: dict = field(default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2})
    config: AdaptConfig = field(default_factory=lambda: AdaptConfig(
        pretrain_epochs=30, adapt_epochs=30, regressor_epochs=100,
        regressor_optimizer="adam", lr_reg=3e-3, batch_size=12))
    gammas: dict = field(default_factory=lambda: {
        "Constraint10": 1e-5, "Constraint25": 1e-5, "Constraint50": 1e-5, "Constraint75": 1e-5,
        "ConstraintAdap": 1e-5, "ConstraintAdapNoTag": 1e-5, "ConstraintLit": 1e-5,
        "KLAdap": 1.0, "KLAdapNoTag": 1.0})

    def to_json(self):
        d = asdict(self)
        d["config"] = self.config.to_json()
        return d


def make_splits(spec: BenchmarkSpec, seed: int):
    src, tgt = generate_synthetic(spec.subjects, spec.slices, spec.size, spec.size, spec.k,
                                  spec.shift, seed)
    s = split_by_subject(src, spec.source_fractions)
    t = split_by_subject(tgt, spec.target_fractions)
    return {"source_train": SliceData(s["train"]), "source_val": SliceData(s["val"]),
            "target_train": SliceData(t["train"]), "target_val": SliceData(t["val"]),
            "target_test": SliceData(t["test"])}


def run_benchmark(seed: int, methods=("NoAdap", "Oracle", "Constraint10"),
                  spec: BenchmarkSpec | None = None, data=None):
    """Run ``methods`` for one seed; returns ``{"methods": {label: result}, "data": splits}``.

    Each result carries the selected-epoch target-val DSC, HD95, target-test DSC,
    seconds per batch and the run record.
    """
    spec = spec or BenchmarkSpec()
    cfg = spec.config.replace(seed=seed)
    data = data or make_splits(spec, seed)
    src, tr, tv = data["source_train"], data["target_train"], data["target_val"]

    torch.manual_seed(seed)
    base = SegmentationModel(spec.k, cfg.width)
    t0 = time.perf_counter()
    base, pre_rec = pretrain_source(base, src, cfg)
    out = {"pretrain": {"record": pre_rec, "seconds": time.perf_counter() - t0,
                        "source_val_dsc": evaluate(base, data["source_val"]).mean_dsc},
           "methods": {}, "data": data, "regressors": {}}

    stats = compute_source_stats(src)
    need_tag = any(m in ("ConstraintAdap", "KLAdap") for m in methods)
    need_notag = any(m in ("ConstraintAdapNoTag", "KLAdapNoTag") for m in methods)
    if need_tag:
        out["regressors"]["tagged"] = _fit_regressor(spec, cfg, seed, src, tr, stats, tv)
    if need_notag:
        out["regressors"]["untagged"] = _fit_regressor(spec, cfg, seed, src, None, stats, tv)
    out["regressor_mask_reads"] = sum(tr.mask_reads.values())

    for label in methods:
        method, regime = METHOD_TABLE[label]
        gamma = spec.gammas.get(label, 0.0)
        mcfg = cfg.replace(method=method, gamma=gamma, **({"regime": asdict(regime)} if regime else {}))
        reads_before_setup = sum(tr.mask_reads.values())
        constraints = None
        reg_key = "untagged" if label.endswith("NoTag") else "tagged"
        if method == "KLAdap":
            constraints = build_kl_prior(out["regressors"][reg_key]["model"], tr,
                                         use_tags=reg_key == "tagged")
        elif regime is not None:
            constraints = build_constraints(regime, tr, stats=stats,
                                            regressor=out["regressors"].get(reg_key, {}).get("model"))
        reads_before = sum(tr.mask_reads.values())
        t0 = time.perf_counter()
        model, rec = adapt(copy.deepcopy(base), src, tr, mcfg, constraints, tv)
        seconds = time.perf_counter() - t0
        test = evaluate(model, data["target_test"], with_hd=True)
        out["methods"][label] = {
            "val_dsc": rec.best_val_dsc, "val_hd95": rec.final.get("val_hd95"),
            "test_dsc": test.mean_dsc, "test_hd95": test.mean_hd95,
            "seconds_per_batch": rec.seconds_per_batch, "seconds": seconds,
            # target-train mask reads while building constraints and during adapt
            "setup_mask_reads": reads_before - reads_before_setup,
            "adapt_mask_reads": sum(tr.mask_reads.values()) - reads_before,
            "gamma": gamma, "record": rec, "model": model, "constraints": constraints,
        }
    return out


def _fit_regressor(spec, cfg, seed, src, tr, stats, tv):
    torch.manual_seed(seed)
    reg = SizeRegressor(spec.k)
    t0 = time.perf_counter()
    reg, rec = train_regressor(reg, src, tr, stats, cfg, tv)
    return {"model": reg, "record": rec, "seconds": time.perf_counter() - t0}
