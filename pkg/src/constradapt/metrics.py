"""Volumetric Dice and HD95, per subject and aggregated as mean +- sd."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

UNDEFINED = math.nan


@dataclass
class VolumePrediction:
    subject_id: str
    labels: np.ndarray  # (D, H, W) hard labels
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim == 2:
            self.labels = self.labels[None]
        if self.labels.ndim != 3:
            raise ValueError("volume labels must be (D, H, W)")


def _volume(v):
    return v.labels if isinstance(v, VolumePrediction) else np.asarray(v)


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")


def dsc(pred, truth, k: int) -> float:
    """2|P & G| / (|P| + |G|) for class ``k``; 1.0 when both are empty."""
    p, g = _volume(pred) == k, _volume(truth) == k
    _check(p, g)
    denom = p.sum() + g.sum()
    return 1.0 if denom == 0 else float(2 * np.logical_and(p, g).sum() / denom)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background voxel (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def _directed(from_surf, to_surf, spacing):
    dist = ndimage.distance_transform_edt(~to_surf, sampling=spacing)
    return dist[from_surf]


def hd95(pred, truth, k: int, spacing=None) -> float:
    """Symmetric 95th-percentile surface distance; NaN when either region is empty."""
    p, g = _volume(pred) == k, _volume(truth) == k
    _check(p, g)
    if not p.any() or not g.any():
        return UNDEFINED
    if spacing is None:
        spacing = pred.spacing if isinstance(pred, VolumePrediction) else (1.0,) * p.ndim
    sp, sg = surface(p), surface(g)
    return float(max(np.percentile(_directed(sp, sg, spacing), 95),
                     np.percentile(_directed(sg, sp, spacing), 95)))


def hausdorff(pred, truth, k: int, spacing=None) -> float:
    p, g = _volume(pred) == k, _volume(truth) == k
    if not p.any() or not g.any():
        return UNDEFINED
    spacing = spacing or (1.0,) * p.ndim
    sp, sg = surface(p), surface(g)
    return float(max(_directed(sp, sg, spacing).max(), _directed(sg, sp, spacing).max()))


def subject_metrics(pred, truth, k_classes: int, with_hd=True) -> dict[int, dict[str, float]]:
    """Per-foreground-class DSC (and HD95) for one subject."""
    out = {}
    for c in range(1, k_classes):
        out[c] = {"dsc": dsc(pred, truth, c),
                  "hd95": hd95(pred, truth, c) if with_hd else UNDEFINED}
    return out


def _mean_sd(values):
    vals = np.array([v for v in values if not math.isnan(v)], dtype=float)
    excluded = len(values) - len(vals)
    if len(vals) == 0:
        return {"mean": UNDEFINED, "sd": UNDEFINED, "n": 0, "excluded": excluded}
    return {"mean": float(vals.mean()), "sd": float(vals.std()), "n": int(len(vals)),
            "excluded": excluded}


@dataclass
class MetricReport:
    per_subject: dict[str, dict[int, dict[str, float]]]
    per_class: dict[int, dict[str, dict]] = field(default_factory=dict)
    overall: dict[str, dict] = field(default_factory=dict)

    @property
    def mean_dsc(self) -> float:
        return self.overall["dsc"]["mean"]

    @property
    def mean_hd95(self) -> float:
        return self.overall["hd95"]["mean"]

    def to_json(self) -> dict:
        def clean(x):
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, float) and math.isnan(x):
                return None
            return x
        return clean({"per_class": self.per_class, "overall": self.overall,
                      "per_subject": self.per_subject})

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "class", "dsc", "hd95"])
            for s, classes in self.per_subject.items():
                for c, m in classes.items():
                    w.writerow([s, c, m["dsc"], "" if math.isnan(m["hd95"]) else m["hd95"]])

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))


def aggregate(per_subject: dict[str, dict[int, dict[str, float]]]) -> MetricReport:
    """Mean and population sd over subjects, per class and for the class-averaged score."""
    if not per_subject:
        raise ValueError("aggregate needs at least one subject")
    classes = sorted({c for m in per_subject.values() for c in m})
    per_class = {c: {key: _mean_sd([per_subject[s][c][key] for s in per_subject if c in per_subject[s]])
                     for key in ("dsc", "hd95")} for c in classes}
    overall = {}
    for key in ("dsc", "hd95"):
        subject_means = []
        for m in per_subject.values():
            vals = [m[c][key] for c in m if not math.isnan(m[c][key])]
            subject_means.append(float(np.mean(vals)) if vals else UNDEFINED)
        overall[key] = _mean_sd(subject_means)
    return MetricReport(per_subject, per_class, overall)


def evaluate_volumes(preds: dict[str, np.ndarray], truths: dict[str, np.ndarray], k: int,
                     with_hd=True, spacing=(1.0, 1.0, 1.0)) -> MetricReport:
    per_subject = {}
    for s, truth in truths.items():
        pv = VolumePrediction(s, preds[s], spacing)
        per_subject[s] = subject_metrics(pv, truth, k, with_hd)
    return aggregate(per_subject)
