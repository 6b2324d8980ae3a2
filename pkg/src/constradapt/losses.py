"""Differentiable objectives on softmax outputs.

Predictions are tensors of shape (B, K, H, W) (a single (K, H, W) prediction is
accepted everywhere and treated as a batch of one).  Sizes are in pixels.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

LOG_EPS = 1e-8
DICE_EPS = 1.0
# smallest soft mass a tagged-present class must keep
POSITIVE_TAG_FLOOR = 1.0


class ConstraintConfigError(KeyError):
    """A constraint or prior is missing for a slice that training needs."""


def _batched(pred):
    return pred.unsqueeze(0) if pred.ndim == 3 else pred


def _as_labels(mask, like):
    mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
    if mask.ndim == 2:
        mask = mask.unsqueeze(0)
    if mask.shape != like.shape[:1] + like.shape[2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match prediction "
                         f"{tuple(like.shape)}")
    return mask.long()


def cross_entropy(pred, mask):
    """Mean over pixels (and batch) of -log p_y."""
    pred = _batched(pred)
    y = _as_labels(mask, pred)
    p_true = pred.gather(1, y.unsqueeze(1)).squeeze(1)
    return -torch.log(p_true.clamp_min(LOG_EPS)).mean()


def dice_loss(pred, mask, eps: float = DICE_EPS):
    """1 - mean over classes and images of the smoothed soft Dice."""
    pred = _batched(pred)
    y = _as_labels(mask, pred)
    onehot = F.one_hot(y, pred.shape[1]).permute(0, 3, 1, 2).to(pred.dtype)
    inter = (pred * onehot).sum(dim=(2, 3))
    denom = pred.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    return 1 - ((2 * inter + eps) / (denom + eps)).mean()


def supervised_loss(pred, mask, kind: str = "CE"):
    if kind == "CE":
        return cross_entropy(pred, mask)
    if kind == "Dice+CE":
        return cross_entropy(pred, mask) + dice_loss(pred, mask)
    raise ValueError(f"unknown source loss {kind!r}")


def soft_sizes(pred):
    """(B, K) soft region sizes."""
    return _batched(pred).sum(dim=(2, 3))


def soft_size(pred, k: int):
    """Soft size of class ``k``: a scalar for one prediction, (B,) for a batch."""
    s = soft_sizes(pred)[:, k]
    return s[0] if pred.ndim == 3 else s


@dataclass(frozen=True)
class SizeBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not 0 <= self.lower <= self.upper:
            raise ValueError(f"need 0 <= lower <= upper, got ({self.lower}, {self.upper})")

    def __iter__(self):
        return iter((self.lower, self.upper))


def interval_penalty(size, lower, upper):
    """[s - upper]_+^2 + [lower - s]_+^2, elementwise."""
    return F.relu(size - upper) ** 2 + F.relu(lower - size) ** 2


def size_penalty(pred, k: int, bounds):
    """Quadratic inequality penalty on the soft size of class ``k``, summed over the batch."""
    lower, upper = bounds
    return interval_penalty(soft_sizes(pred)[:, k], lower, upper).sum()


def tag_penalty(pred, k: int, present: bool, floor: float = POSITIVE_TAG_FLOOR):
    """Image-level tag as a size constraint: absent -> size <= 0, present -> size >= floor."""
    pred = _batched(pred)
    area = pred.shape[-1] * pred.shape[-2]
    bounds = (floor, float(area)) if present else (0.0, 0.0)
    return size_penalty(pred, k, bounds)


class ConstraintSet:
    """Per-(slice, class) size bounds.

    Stored densely as (N, K) ``lower``/``upper`` arrays plus an ``active`` mask;
    only active cells count as constraints.
    """

    def __init__(self, slice_ids: Sequence[str], lower, upper, active=None):
        self.slice_ids = list(slice_ids)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        self.active = (np.ones_like(self.lower, dtype=bool) if active is None
                       else np.asarray(active, dtype=bool))
        if self.lower.shape != self.upper.shape or self.lower.shape != self.active.shape:
            raise ValueError("lower, upper and active must share one (N, K) shape")
        if self.lower.shape[0] != len(self.slice_ids):
            raise ValueError("one row of bounds per slice id is required")
        bad = self.active & ~((0 <= self.lower) & (self.lower <= self.upper))
        if bad.any():
            raise ValueError(f"{int(bad.sum())} constraints violate 0 <= lower <= upper")
        self._row = {s: i for i, s in enumerate(self.slice_ids)}

    @classmethod
    def empty(cls, k: int):
        z = np.zeros((0, k))
        return cls([], z, z)

    def __len__(self):
        return int(self.active.sum())

    @property
    def k(self) -> int:
        return self.lower.shape[1]

    def bounds(self, slice_id: str, k: int) -> SizeBounds | None:
        i = self._row[slice_id]
        return SizeBounds(self.lower[i, k], self.upper[i, k]) if self.active[i, k] else None

    def rows(self, slice_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._row[s] for s in slice_ids], dtype=np.int64)
        except KeyError as exc:
            raise ConstraintConfigError(f"no constraints for slice {exc.args[0]}") from None

    def require(self, slice_ids: Sequence[str]):
        """Fail early if any slice a trainer will draw has no row."""
        self.rows(slice_ids)

    def batch(self, slice_ids, dtype=torch.float32):
        r = self.rows(slice_ids)
        return (torch.as_tensor(self.lower[r], dtype=dtype),
                torch.as_tensor(self.upper[r], dtype=dtype),
                torch.as_tensor(self.active[r]))

    def items(self):
        for i, s in enumerate(self.slice_ids):
            for k in np.flatnonzero(self.active[i]):
                yield s, int(k), SizeBounds(float(self.lower[i, k]), float(self.upper[i, k]))

    def to_json(self) -> list[dict]:
        return [{"slice": s, "class": k, "lower": b.lower, "upper": b.upper}
                for s, k, b in self.items()]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, records: list[dict], k: int):
        ids = list(dict.fromkeys(r["slice"] for r in records))
        row = {s: i for i, s in enumerate(ids)}
        lower, upper = np.zeros((len(ids), k)), np.zeros((len(ids), k))
        active = np.zeros((len(ids), k), dtype=bool)
        for r in records:
            i, c = row[r["slice"]], int(r["class"])
            lower[i, c], upper[i, c], active[i, c] = r["lower"], r["upper"], True
        return cls(ids, lower, upper, active)

    @classmethod
    def load(cls, path, k: int):
        return cls.from_json(json.loads(Path(path).read_text()), k)


def total_penalty(preds, slice_ids: Sequence[str], constraints: ConstraintSet):
    """Sum of per-slice, per-class interval penalties over a batch (no normalisation)."""
    preds = _batched(preds)
    if len(constraints) == 0:
        return preds.sum() * 0.0
    lower, upper, active = constraints.batch(slice_ids, dtype=preds.dtype)
    pen = interval_penalty(soft_sizes(preds), lower, upper)
    return torch.where(active, pen, torch.zeros_like(pen)).sum()


class LabelDistributionPrior:
    """Per-slice target label proportions used by the KL-matching baseline.

    ``proportions`` is (N, K): background-completed class fractions of the image.
    """

    def __init__(self, slice_ids: Sequence[str], proportions):
        self.slice_ids = list(slice_ids)
        self.proportions = np.asarray(proportions, dtype=np.float64)
        if self.proportions.min(initial=0) < 0 or self.proportions.max(initial=0) > 1:
            raise ValueError("prior entries must lie in [0, 1]")
        self._row = {s: i for i, s in enumerate(self.slice_ids)}

    @classmethod
    def from_foreground(cls, slice_ids, fg_fractions):
        fg = np.clip(np.asarray(fg_fractions, dtype=np.float64), 0, 1)
        total = fg.sum(1, keepdims=True)
        fg = np.where(total > 1, fg / np.maximum(total, 1e-12), fg)
        return cls(slice_ids, np.concatenate([1 - fg.sum(1, keepdims=True), fg], axis=1))

    def require(self, slice_ids):
        self.batch(slice_ids)

    def batch(self, slice_ids, dtype=torch.float32):
        try:
            r = [self._row[s] for s in slice_ids]
        except KeyError as exc:
            raise ConstraintConfigError(f"no prior for slice {exc.args[0]}") from None
        return torch.as_tensor(self.proportions[r], dtype=dtype)

    def to_json(self) -> list[dict]:
        return [{"slice": s, "proportions": p.tolist()}
                for s, p in zip(self.slice_ids, self.proportions)]

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def kl_matching_loss(pred, prior, direction: str = "prior||pred"):
    """KL divergence between the prior label distribution and the predicted one.

    ``prior`` is a (K,) or (B, K) distribution over classes.  Terms where the
    first argument of the KL is zero contribute nothing.  Summed over the batch.
    """
    pred = _batched(pred)
    q = soft_sizes(pred) / (pred.shape[-1] * pred.shape[-2])
    d = torch.as_tensor(prior, dtype=pred.dtype)
    d = d.expand_as(q) if d.ndim == 1 else d
    if direction == "prior||pred":
        a, b = d, q
    elif direction == "pred||prior":
        a, b = q, d
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    terms = a * (torch.log(a.clamp_min(LOG_EPS)) - torch.log(b.clamp_min(LOG_EPS)))
    return torch.where(a > 0, terms, torch.zeros_like(terms)).sum()


def regressor_l2_loss(predicted, target):
    """Squared L2 distance, summed over classes (and batch)."""
    predicted = torch.as_tensor(predicted)
    target = torch.as_tensor(target, dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((predicted - target) ** 2).sum()


def adaptation_objective(source_pred, source_mask, target_pred, target_ids, gamma: float,
                         constraints: ConstraintSet, source_loss: str = "CE"):
    """Supervised source loss plus ``gamma`` times the target constraint penalty."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    sup = supervised_loss(source_pred, source_mask, source_loss)
    if gamma == 0:
        return sup
    return sup + gamma * total_penalty(target_pred, target_ids, constraints)
