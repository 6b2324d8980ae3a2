"""Quickstart: adapt a source-trained segmenter to a shifted target with size constraints.

Runs in about two minutes on one CPU core:

    python3 demos/01_quickstart.py
"""
# %% Data
# Source slices carry masks. Target slices only carry image-level tags saying
# which classes appear; their masks are kept behind an eval-only gate.
import copy

import torch

from constradapt.bounds import BoundRegime, build_constraints, compute_source_stats
from constradapt.data import SliceData, generate_synthetic, split_by_subject
from constradapt.model import SegmentationModel, SizeRegressor
from constradapt.trainer import AdaptConfig, adapt, evaluate, pretrain_source, train_regressor

torch.set_num_threads(1)
torch.manual_seed(0)

src, tgt = generate_synthetic(10, 20, 32, 32, 2, "mri_like", seed=0)
s = split_by_subject(src, {"train": 0.8, "val": 0.2})
t = split_by_subject(tgt, {"train": 0.6, "val": 0.2, "test": 0.2})
source, target, target_val = SliceData(s["train"]), SliceData(t["train"]), SliceData(t["val"])
print(f"{len(source)} source slices, {len(target)} unlabeled target slices")

# %% Source-only model
cfg = AdaptConfig(pretrain_epochs=25, adapt_epochs=25, regressor_epochs=80, batch_size=12,
                  gamma=1e-5, regressor_optimizer="adam", lr_reg=3e-3)
base, _ = pretrain_source(SegmentationModel(2), source, cfg)
print(f"source-only DSC on target: {evaluate(base, target_val).mean_dsc:.3f}")

# %% Size prior
# A small regressor learns foreground size from source masks. Tagged target
# slices add fake labels: zero when the tag says absent, the source median otherwise.
regressor, _ = train_regressor(SizeRegressor(2), source, target, compute_source_stats(source), cfg)
constraints = build_constraints(BoundRegime("learned", margin=0.10), target, regressor=regressor)
first = next(i for i, tags in enumerate(target.tags) if tags[1])
lo, hi = constraints.bounds(target.slice_ids[first], 1)
print(f"first tagged target slice: foreground size must lie in [{lo:.1f}, {hi:.1f}] pixels")

# %% Adaptation
# Cross-entropy on source batches plus a quadratic penalty whenever a target
# prediction's soft size leaves its interval.
model, record = adapt(copy.deepcopy(base), source, target, cfg.replace(method="ConstraintAdap"),
                      constraints, target_val)
print(f"adapted DSC on target:     {record.best_val_dsc:.3f} (epoch {record.selected_epoch})")
print("target masks read during adaptation:", sum(target.mask_reads.values()))
