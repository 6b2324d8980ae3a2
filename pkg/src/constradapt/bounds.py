"""Constraint-set construction under the different size-prior regimes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, SliceData, ground_truth_size
from .losses import POSITIVE_TAG_FLOOR, ConstraintSet, LabelDistributionPrior, SizeBounds
from .model import SizeRegressor, predict

REGIMES = ("oracle_margin", "learned", "source_stats", "tags_only")
PRESENCE_THRESHOLD = 1.0


class BoundsError(ValueError):
    """Bounds cannot be built from the supplied inputs."""


@dataclass(frozen=True)
class BoundRegime:
    kind: str = "learned"
    margin: float = 0.10
    use_tags: bool = True
    allow_ground_truth: bool = False

    def __post_init__(self):
        if self.kind not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}")
        if not 0 <= self.margin < 1:
            raise ValueError("margin must lie in [0, 1)")
        if self.kind == "oracle_margin" and not self.allow_ground_truth:
            raise ValueError("oracle_margin bounds read target ground truth; "
                             "set allow_ground_truth=True to acknowledge it")


@dataclass
class SourceSizeStats:
    """Per-class statistics of positive source-train region sizes (index = class)."""
    median: np.ndarray
    minimum: np.ndarray
    q1: np.ndarray
    q3: np.ndarray
    maximum: np.ndarray
    n_positive: np.ndarray

    def require(self, k: int):
        if self.n_positive[k] == 0:
            raise BoundsError(f"class {k} never appears in source-train; median size undefined")
        return float(self.median[k])

    def to_json(self) -> dict:
        return {f: getattr(self, f).tolist() for f in
                ("median", "minimum", "q1", "q3", "maximum", "n_positive")}


def margin_interval(size: float, margin: float) -> SizeBounds:
    return SizeBounds((1 - margin) * size, (1 + margin) * size)


def oracle_bounds(mask, k: int, margin: float) -> SizeBounds:
    tau = ground_truth_size(mask, k)
    return margin_interval(tau, margin) if tau > 0 else SizeBounds(0.0, 0.0)


def learned_bounds(regressor: SizeRegressor | None, pixels, tags=None, margin: float = 0.10,
                   threshold: float = PRESENCE_THRESHOLD) -> list[SizeBounds]:
    """Bounds for every foreground class of one slice from the regressor's estimate.

    Without tags, a class counts as present when its estimate reaches ``threshold``.
    """
    if regressor is None:
        raise BoundsError("learned bounds need a trained size regressor")
    est = predict(regressor, np.asarray(pixels)[None])[0].numpy()
    return [_gate(est[k - 1], None if tags is None else tags[k], margin, threshold)
            for k in range(1, regressor.k)]


def _gate(tau_hat, present, margin, threshold):
    if present is None:
        present = tau_hat >= threshold
    return margin_interval(float(tau_hat), margin) if present else SizeBounds(0.0, 0.0)


def source_stat_bounds(stats: SourceSizeStats, tags, k: int, margin: float = 0.10) -> SizeBounds:
    median = stats.require(k)
    return margin_interval(median, margin) if tags[k] else SizeBounds(0.0, 0.0)


def fake_size_labels(stats: SourceSizeStats, tags, k: int) -> float:
    """Regressor target for a tagged target image: the source median when present, else 0."""
    return float(stats.median[k]) if tags[k] else 0.0


def compute_source_stats(manifest: DatasetManifest | SliceData) -> SourceSizeStats:
    data = manifest if isinstance(manifest, SliceData) else SliceData(manifest)
    if data.domain != "source":
        raise BoundsError("size statistics must come from source masks")
    masks = data.masks()
    sizes = np.stack([(masks == c).sum(axis=(1, 2)) for c in range(data.k)], axis=1)
    stats = {name: np.zeros(data.k) for name in ("median", "minimum", "q1", "q3", "maximum")}
    n_pos = (sizes > 0).sum(0)
    for c in range(data.k):
        pos = sizes[sizes[:, c] > 0, c].astype(np.float64)
        if len(pos):
            # np.median averages the two middle values for even counts
            stats["median"][c] = np.median(pos)
            stats["minimum"][c], stats["maximum"][c] = pos.min(), pos.max()
            stats["q1"][c], stats["q3"][c] = np.percentile(pos, [25, 75])
    return SourceSizeStats(n_positive=n_pos, **stats)


def regressor_estimates(regressor: SizeRegressor, data: SliceData) -> np.ndarray:
    """(N, K) size estimates with a zero background column."""
    est = predict(regressor, data.images).numpy()
    return np.concatenate([np.zeros((len(est), 1)), est], axis=1)


def build_constraints(regime: BoundRegime, target: SliceData, *, regressor=None,
                      stats: SourceSizeStats | None = None,
                      threshold: float = PRESENCE_THRESHOLD) -> ConstraintSet:
    """ConstraintSet over every slice of ``target`` for all foreground classes."""
    n, k = len(target), target.k
    tags = target.tags if regime.use_tags else None
    if regime.use_tags and tags is None and regime.kind != "oracle_margin":
        raise BoundsError("regime uses tags but the target data carries none")
    if regime.kind == "oracle_margin":
        # explicit eval-only read, acknowledged by the regime
        masks = target.masks(allow_eval_only=True, purpose="bounds")
        sizes = np.stack([(masks == c).sum(axis=(1, 2)) for c in range(k)], 1).astype(float)
        present = sizes > 0
    elif regime.kind == "learned":
        if regressor is None:
            raise BoundsError("learned regime needs a trained size regressor")
        sizes = regressor_estimates(regressor, target)
        present = tags if tags is not None else sizes >= threshold
    elif regime.kind == "source_stats":
        if stats is None:
            raise BoundsError("source_stats regime needs SourceSizeStats")
        sizes = np.tile([0.0] + [stats.require(c) for c in range(1, k)], (n, 1))
        present = tags
        if present is None:
            raise BoundsError("source_stats bounds are gated by target tags")
    else:  # tags_only
        area = float(target.images.shape[1] * target.images.shape[2])
        present = tags
        if present is None:
            raise BoundsError("tags_only regime needs target tags")
        lower = np.where(present, POSITIVE_TAG_FLOOR, 0.0)
        upper = np.where(present, area, 0.0)
        return _finish(target, lower, upper)
    m = regime.margin
    lower = np.where(present, (1 - m) * sizes, 0.0)
    upper = np.where(present, (1 + m) * sizes, 0.0)
    return _finish(target, lower, upper)


def _finish(target, lower, upper):
    active = np.ones_like(lower, dtype=bool)
    active[:, 0] = False
    lower, upper = lower.copy(), upper.copy()
    lower[:, 0] = upper[:, 0] = 0.0
    return ConstraintSet(target.slice_ids, lower, upper, active)


def build_kl_prior(regressor: SizeRegressor, target: SliceData, *, use_tags=True,
                   threshold: float = PRESENCE_THRESHOLD) -> LabelDistributionPrior:
    """Predicted size over image area when tagged present, zero otherwise."""
    sizes = regressor_estimates(regressor, target)[:, 1:]
    if use_tags:
        if target.tags is None:
            raise BoundsError("tagged KL prior needs target tags")
        present = target.tags[:, 1:]
    else:
        present = sizes >= threshold
    area = target.images.shape[1] * target.images.shape[2]
    return LabelDistributionPrior.from_foreground(target.slice_ids, np.where(present, sizes / area, 0.0))


def regressor_training_targets(source: SliceData, target: SliceData | None,
                               stats: SourceSizeStats):
    """Images and size labels for the regressor: true source sizes plus fake target sizes.

    ``target=None`` (no tags available) trains on source images only.
    """
    masks = source.masks()
    k = source.k
    y_src = np.stack([(masks == c).sum(axis=(1, 2)) for c in range(1, k)], 1).astype(np.float32)
    if target is None:
        return source.images, y_src
    if target.tags is None:
        raise BoundsError("fake size labels need target tags")
    y_tgt = np.array([[fake_size_labels(stats, t, c) for c in range(1, k)] for t in target.tags],
                     dtype=np.float32)
    return np.concatenate([source.images, target.images]), np.concatenate([y_src, y_tgt])


__all__ = ["BoundRegime", "SourceSizeStats", "BoundsError", "oracle_bounds", "learned_bounds",
           "source_stat_bounds", "fake_size_labels", "compute_source_stats", "build_constraints",
           "build_kl_prior", "regressor_training_targets", "regressor_estimates",
           "margin_interval", "PRESENCE_THRESHOLD", "REGIMES"]
