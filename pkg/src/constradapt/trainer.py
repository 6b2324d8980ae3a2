"""Source pretraining, size-regressor training and constrained adaptation."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .bounds import BoundRegime, regressor_training_targets, SourceSizeStats
from .data import SliceData
from .losses import (ConstraintSet, LabelDistributionPrior, kl_matching_loss,
                     regressor_l2_loss, supervised_loss, total_penalty)
from .metrics import evaluate_volumes
from .model import SegmentationModel, SizeRegressor, predict

log = logging.getLogger(__name__)

METHODS = ("NoAdap", "ConstraintAdap", "KLAdap", "Oracle", "Constraint_margin")
OPTIMIZERS = ("adam", "sgd")


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite."""


class GridSearchError(RuntimeError):
    """Every run of a grid search failed."""


@dataclass
class AdaptConfig:
    gamma: float = 1e-3
    lr_seg: float = 1e-3
    lr_reg: float = 5e-6
    pretrain_epochs: int = 40
    adapt_epochs: int = 60
    regressor_epochs: int = 60
    batch_size: int = 12
    source_loss: str = "CE"
    regime: BoundRegime = field(default_factory=BoundRegime)
    method: str = "ConstraintAdap"
    optimizer: str = "adam"
    regressor_optimizer: str = "sgd"
    seed: int = 0
    gamma_grid: list[float] = field(default_factory=lambda: [0.01, 0.1, 1.0, 10.0])
    augment: bool = True
    kl_direction: str = "prior||pred"
    width: int = 8

    def __post_init__(self):
        if isinstance(self.regime, dict):
            self.regime = BoundRegime(**self.regime)
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if min(self.pretrain_epochs, self.adapt_epochs, self.regressor_epochs) < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.optimizer not in OPTIMIZERS or self.regressor_optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizers must be one of {OPTIMIZERS}")
        if self.source_loss not in ("CE", "Dice+CE"):
            raise ValueError("source_loss must be 'CE' or 'Dice+CE'")

    def to_json(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "AdaptConfig":
        d = asdict(self)
        d.update(changes)
        return AdaptConfig(**d)


@dataclass
class RunRecord:
    phase: str
    method: str = ""
    epochs: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None
    best_val_dsc: float | None = None
    seconds_per_batch: float | None = None
    final: dict = field(default_factory=dict)

    def log_epoch(self, **row):
        self.epochs.append(row)

    def select(self, key="val_dsc"):
        scored = [(r[key], -r["epoch"]) for r in self.epochs if r.get(key) is not None]
        if scored:
            best = max(scored)
            self.best_val_dsc, self.selected_epoch = best[0], -best[1]

    def series(self, key):
        return [r.get(key) for r in self.epochs]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for row in self.epochs:
                fh.write(json.dumps(dict(row, phase=self.phase, method=self.method)) + "\n")

    def summary(self) -> dict:
        return {"phase": self.phase, "method": self.method, "selected_epoch": self.selected_epoch,
                "best_val_dsc": self.best_val_dsc, "seconds_per_batch": self.seconds_per_batch,
                "epochs": len(self.epochs), **self.final}


# ---------------------------------------------------------------------------
# helpers

def seed_everything(seed: int):
    torch.manual_seed(seed)


def _make_optimizer(kind, params, lr):
    return torch.optim.Adam(params, lr=lr) if kind == "adam" else torch.optim.SGD(params, lr=lr)


def _check_finite(loss, phase, epoch, step):
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{phase}: non-finite loss at epoch {epoch}, step {step}")


class _BatchStream:
    """Shuffled mini-batch indices from a dedicated RNG stream."""

    def __init__(self, n, batch_size, seed):
        self.n, self.bs = n, batch_size
        self.rng = np.random.default_rng(seed)
        self._queue = np.array([], dtype=np.int64)

    def steps_per_epoch(self):
        return math.ceil(self.n / self.bs)

    def epoch(self):
        perm = self.rng.permutation(self.n)
        return [perm[i:i + self.bs] for i in range(0, self.n, self.bs)]

    def draw(self):
        """Next batch from an endless sequence of permutations."""
        if len(self._queue) < self.bs:
            self._queue = np.concatenate([self._queue, self.rng.permutation(self.n)])
        out, self._queue = self._queue[:self.bs], self._queue[self.bs:]
        return out


def _augment(images, masks, rng):
    """Random flips and intensity shifts, applied to source batches only."""
    images, masks = images.copy(), masks.copy()
    for i in range(len(images)):
        if rng.random() < 0.5:
            images[i], masks[i] = images[i, :, ::-1], masks[i, :, ::-1]
        if rng.random() < 0.5:
            images[i], masks[i] = images[i, ::-1], masks[i, ::-1]
        gain, bias = rng.uniform(0.9, 1.1), rng.uniform(-0.05, 0.05)
        images[i] = np.clip(gain * images[i] + bias, 0, 1)
    return images, masks


def _augment_appearance(images, rng, field_amplitude=0.25, noise_std=0.05):
    """Flips plus wide contrast changes, a smooth multiplicative-looking field and noise.

    Sizes are invariant to all of these, which is what the regressor needs to
    carry over to scanners it never saw.
    """
    images, _ = _augment(images, np.zeros(images.shape, dtype=np.uint8), rng)
    n, h, w = images.shape
    for i in range(n):
        gain, bias = rng.uniform(0.4, 1.2), rng.uniform(-0.1, 0.4)
        coarse = ndimage.zoom(rng.normal(0, 1, (4, 4)), (h / 4, w / 4), order=3)[:h, :w]
        coarse *= rng.uniform(0, field_amplitude) / max(np.abs(coarse).max(), 1e-12)
        noise = rng.normal(0, rng.uniform(0, noise_std), (h, w))
        images[i] = np.clip(gain * images[i] + bias + coarse + noise, 0, 1)
    return images


class _SourceFeed:
    """Source batches (images, masks), with optional augmentation, from fixed seeds."""

    def __init__(self, data: SliceData, config: AdaptConfig, stream_seed: int, masks=None):
        self.data = data
        self.stream = _BatchStream(len(data), config.batch_size, [config.seed, stream_seed, 0])
        self.aug_rng = np.random.default_rng([config.seed, stream_seed, 1])
        self.augment = config.augment
        self.masks = data.masks() if masks is None else masks

    def epoch(self):
        for idx in self.stream.epoch():
            x, y = self.data.images[idx], self.masks[idx]
            if self.augment:
                x, y = _augment(x, y, self.aug_rng)
            yield torch.from_numpy(np.ascontiguousarray(x)).unsqueeze(1), torch.from_numpy(
                np.ascontiguousarray(y)).long()


def hard_predictions(model, data: SliceData) -> np.ndarray:
    return predict(model, data.images).argmax(1).numpy().astype(np.uint8)


def evaluate(model, data: SliceData, with_hd=False):
    """3D metrics per subject, reading ``data`` masks through the evaluation gate."""
    labels = hard_predictions(model, data)
    truth = data.eval_masks()
    vols = data.volumes()
    preds = {s: labels[ix] for s, ix in vols.items()}
    truths = {s: truth[ix] for s, ix in vols.items()}
    return evaluate_volumes(preds, truths, data.k, with_hd=with_hd)


class _Selector:
    """Keeps the parameters of the best validation epoch."""

    def __init__(self, model, record: RunRecord, val: SliceData | None):
        self.model, self.record, self.val = model, record, val
        self.best_state, self.best = None, -math.inf

    def __call__(self, epoch, **row):
        if self.val is not None:
            score = evaluate(self.model, self.val).mean_dsc
            row["val_dsc"] = score
            if score > self.best:
                self.best = score
                self.best_state = copy.deepcopy(self.model.state_dict())
        self.record.log_epoch(epoch=epoch, **row)

    def finish(self, with_hd=True):
        self.record.select()
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
            if with_hd:
                report = evaluate(self.model, self.val, with_hd=True)
                self.record.final.update(val_dsc=report.mean_dsc, val_hd95=report.mean_hd95)


# ---------------------------------------------------------------------------
# phases

def pretrain_source(model: SegmentationModel, source: SliceData, config: AdaptConfig,
                    val: SliceData | None = None, epochs: int | None = None):
    """Supervised training on source slices only."""
    record = RunRecord("pretrain", "source")
    _supervised_loop(model, source, config, epochs or config.pretrain_epochs, record, val,
                     stream_seed=11, phase="pretrain", augment=config.augment)
    return model, record


def _supervised_loop(model, data, config, epochs, record, val, stream_seed, phase, augment):
    seed_everything(config.seed)
    # the Oracle baseline is the one training path allowed to read target labels
    masks = data.masks(allow_eval_only=True, purpose="oracle") if data.domain == "target" else None
    if augment != config.augment:
        config = config.replace(augment=augment)
    feed = _SourceFeed(data, config, stream_seed, masks)
    opt = _make_optimizer(config.optimizer, model.parameters(), config.lr_seg)
    select = _Selector(model, record, val)
    model.train()
    n_steps, t_total = 0, 0.0
    for epoch in range(epochs):
        losses = []
        for step, (x, y) in enumerate(feed.epoch()):
            t0 = time.perf_counter()
            loss = supervised_loss(model(x), y, config.source_loss)
            _check_finite(loss, phase, epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            t_total += time.perf_counter() - t0
            n_steps += 1
            losses.append(loss.item())
        select(epoch, supervised=float(np.mean(losses)), penalty=0.0, total=float(np.mean(losses)))
    record.seconds_per_batch = t_total / max(n_steps, 1)
    select.finish(with_hd=val is not None)


def train_regressor(regressor: SizeRegressor, source: SliceData, target: SliceData | None,
                    stats: SourceSizeStats, config: AdaptConfig, val: SliceData | None = None):
    """Fit the size regressor on true source sizes and fake target sizes.

    ``target=None`` corresponds to the no-tag setting: source images only.
    ``val`` (target-domain, evaluation masks) is only used for the logged error.
    """
    seed_everything(config.seed)
    images, sizes = regressor_training_targets(source, target, stats)
    record = RunRecord("regressor", "tagged" if target is not None else "untagged")
    record.final["train_images"] = int(len(images))
    stream = _BatchStream(len(images), config.batch_size, [config.seed, 21])
    opt = _make_optimizer(config.regressor_optimizer, regressor.parameters(), config.lr_reg)
    n_source = len(source)
    aug_rng = np.random.default_rng([config.seed, 22])
    y_all = torch.from_numpy(sizes)
    regressor.train()
    t_total, n_steps = 0.0, 0
    for epoch in range(config.regressor_epochs):
        losses = []
        for step, idx in enumerate(stream.epoch()):
            x = images[idx]
            if config.augment:
                # source images only; target images keep their fake labels untouched
                src = idx < n_source
                x = x.copy()
                x[src] = _augment_appearance(x[src], aug_rng)
            x = torch.from_numpy(np.ascontiguousarray(x)).unsqueeze(1)
            t0 = time.perf_counter()
            loss = regressor_l2_loss(regressor(x), y_all[idx]) / len(idx)
            _check_finite(loss, "regressor", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            t_total += time.perf_counter() - t0
            n_steps += 1
            losses.append(loss.item())
        row = {"epoch": epoch, "l2": float(np.mean(losses))}
        if val is not None and epoch == config.regressor_epochs - 1:
            row.update(size_error_summary(regressor, val))
        record.log_epoch(**row)
    record.seconds_per_batch = t_total / max(n_steps, 1)
    record.final.update({k: v for k, v in record.epochs[-1].items() if k != "epoch"})
    return regressor, record


def size_errors(regressor: SizeRegressor, data: SliceData):
    """Relative errors (est - true) / true over present (slice, class) pairs, plus absent-slice estimates."""
    est = predict(regressor, data.images).numpy()
    masks = data.eval_masks()
    true = np.stack([(masks == c).sum(axis=(1, 2)) for c in range(1, data.k)], 1)
    pos = true > 0
    return (est[pos] - true[pos]) / true[pos], est[~pos]


def size_error_summary(regressor, data):
    rel, absent = size_errors(regressor, data)
    return {"median_abs_rel_error": float(np.median(np.abs(rel))) if len(rel) else None,
            "median_absent_estimate": float(np.median(absent)) if len(absent) else None}


def adapt(model: SegmentationModel, source: SliceData, target: SliceData, config: AdaptConfig,
          constraints: ConstraintSet | LabelDistributionPrior | None = None,
          val: SliceData | None = None):
    """One adaptation run from an already-pretrained ``model``.

    Each step pairs an independent source batch with a target batch.  Target
    masks are never read except by the Oracle baseline.
    """
    method = config.method
    record = RunRecord("adapt", method)
    if method == "Oracle":
        _supervised_loop(model, target, config, config.adapt_epochs, record, val,
                         stream_seed=31, phase="oracle", augment=False)
        return model, record
    gamma = 0.0 if method == "NoAdap" else config.gamma
    if gamma > 0:
        if method == "KLAdap" and not isinstance(constraints, LabelDistributionPrior):
            raise ValueError("KLAdap needs a LabelDistributionPrior")
        if method != "KLAdap" and not isinstance(constraints, ConstraintSet):
            raise ValueError(f"{method} needs a ConstraintSet")
        constraints.require(target.slice_ids)

    seed_everything(config.seed)
    # source stream seeded as in pretraining so that gamma=0 continues it exactly
    feed = _SourceFeed(source, config, stream_seed=11)
    tstream = _BatchStream(len(target), config.batch_size, [config.seed, 41])
    opt = _make_optimizer(config.optimizer, model.parameters(), config.lr_seg)
    select = _Selector(model, record, val)
    target_x = torch.from_numpy(target.images).unsqueeze(1)
    model.train()
    t_total, n_steps = 0.0, 0
    for epoch in range(config.adapt_epochs):
        sup_l, pen_l, tot_l, sat_l = [], [], [], []
        for step, (xs, ys) in enumerate(feed.epoch()):
            if gamma > 0:
                # loading the target batch counts as data loading, like the source feed
                idx = tstream.draw()
                ids = [target.slice_ids[i] for i in idx]
                xt = target_x[idx]
            t0 = time.perf_counter()
            if gamma == 0:
                loss = supervised_loss(model(xs), ys, config.source_loss)
                sup, pen = loss, None
            else:
                # one forward over both batches; GroupNorm keeps samples independent
                p = model(torch.cat([xs, xt]))
                ps, pt = p[:len(xs)], p[len(xs):]
                sup = supervised_loss(ps, ys, config.source_loss)
                if method == "KLAdap":
                    pen = kl_matching_loss(pt, constraints.batch(ids), config.kl_direction)
                else:
                    pen = total_penalty(pt, ids, constraints)
                loss = sup + gamma * pen
            _check_finite(loss, "adapt", epoch, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            t_total += time.perf_counter() - t0
            n_steps += 1
            if pen is not None and method != "KLAdap":
                sat_l.append(_satisfaction(pt.detach(), ids, constraints))
            sup_l.append(sup.item())
            pen_l.append(0.0 if pen is None else pen.item())
            tot_l.append(loss.item())
        select(epoch, supervised=float(np.mean(sup_l)), penalty=float(np.mean(pen_l)),
               total=float(np.mean(tot_l)),
               constraint_satisfaction=float(np.mean(sat_l)) if sat_l else None)
    record.seconds_per_batch = t_total / max(n_steps, 1)
    select.finish(with_hd=val is not None)
    return model, record


def _satisfaction(pred, ids, constraints: ConstraintSet):
    lower, upper, active = constraints.batch(ids)
    s = pred.sum(dim=(2, 3))
    ok = (s >= lower - 1e-6) & (s <= upper + 1e-6)
    return float(ok[active].float().mean()) if active.any() else 1.0


def grid_search_gamma(pretrained: SegmentationModel, source: SliceData, target: SliceData,
                      val: SliceData, config: AdaptConfig, constraints=None):
    """Adapt once per gamma from the same pretrained weights; pick the best validation DSC.

    Ties go to the smaller gamma.  Returns ``(best_gamma, best_model, records)``.
    """
    if not config.gamma_grid:
        raise ValueError("gamma_grid is empty")
    records, failures, best = {}, {}, None
    for gamma in sorted(config.gamma_grid):
        model = copy.deepcopy(pretrained)
        try:
            model, rec = adapt(model, source, target, config.replace(gamma=gamma), constraints, val)
        except TrainingDivergedError as exc:
            failures[gamma] = str(exc)
            log.warning("gamma=%g diverged: %s", gamma, exc)
            continue
        records[gamma] = rec
        if best is None or rec.best_val_dsc > best[1]:
            best = (gamma, rec.best_val_dsc, model)
    if best is None:
        raise GridSearchError("all gamma values diverged: " + json.dumps(failures))
    return best[0], best[2], records


def save_records(records: list[RunRecord], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "runrecord.jsonl"
    with open(path, "w") as fh:
        for rec in records:
            for row in rec.epochs:
                fh.write(json.dumps(dict(row, phase=rec.phase, method=rec.method)) + "\n")
    return path
