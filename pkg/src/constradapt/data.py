"""Synthetic domain-shifted slice datasets, manifests and mask-gated access.

Each subject is a stack of 2D slices.  Foreground structures are ellipsoids
cut axially, so consecutive slices share geometry and structures fade in and
out along the stack (giving slices where a class is absent).  Target-domain
pixels are rendered from the same generative model and then pushed through a
:class:`ShiftSpec` intensity transform.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

DOMAINS = ("source", "target")
SPLITS = ("train", "val", "test")


class GenerationError(RuntimeError):
    """Raised when structures cannot be placed inside a slice."""


class ManifestError(ValueError):
    """Raised for malformed manifests or entries violating the data contract."""


class MaskAccessError(PermissionError):
    """Raised when a training path asks for an eval-only mask."""


@dataclass(frozen=True)
class ShiftSpec:
    contrast_gain: float = 1.0
    contrast_bias: float = 0.0
    invert: bool = False
    bias_field_amplitude: float = 0.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.bias_field_amplitude < 0 or self.noise_std < 0:
            raise ValueError("bias_field_amplitude and noise_std must be >= 0")

    @property
    def is_identity(self) -> bool:
        return (self.contrast_gain == 1.0 and self.contrast_bias == 0.0 and not self.invert
                and self.bias_field_amplitude == 0.0 and self.noise_std == 0.0)

    @classmethod
    def from_json(cls, text_or_dict) -> "ShiftSpec":
        d = json.loads(text_or_dict) if isinstance(text_or_dict, str) else dict(text_or_dict)
        return cls(**d)


SHIFT_PRESETS = {
    "identity": ShiftSpec(),
    "invert": ShiftSpec(invert=True),
    # Compressed contrast, raised floor and a strong smooth bias field: background
    # regions of the target look bright enough to pass for foreground.
    "mri_like": ShiftSpec(contrast_gain=0.55, contrast_bias=0.3,
                          bias_field_amplitude=0.18, noise_std=0.04),
}


def resolve_shift(value) -> ShiftSpec:
    """Accept a preset name, a JSON string, a dict or a ShiftSpec."""
    if isinstance(value, ShiftSpec):
        return value
    if isinstance(value, dict):
        return ShiftSpec(**value)
    if value in SHIFT_PRESETS:
        return SHIFT_PRESETS[value]
    try:
        return ShiftSpec.from_json(value)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ValueError(f"unknown shift preset or invalid JSON: {value!r}") from exc


@dataclass
class Slice2D:
    pixels: np.ndarray
    subject_id: str
    slice_index: int
    domain: str

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 8:
            raise ValueError(f"slice must be 2D with H, W >= 8, got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("slice intensities must lie in [0, 1]")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")


def tags_from_mask(labels: np.ndarray, k: int) -> np.ndarray:
    """Presence flags per class; background is always flagged present."""
    present = np.bincount(labels.ravel(), minlength=k)[:k] > 0
    present[0] = True
    return present


def ground_truth_size(mask: np.ndarray, k: int) -> int:
    """Number of pixels carrying label ``k``."""
    return int(np.count_nonzero(np.asarray(mask) == k))


# ---------------------------------------------------------------------------
# synthesis

@dataclass(frozen=True)
class _Structure:
    k: int
    z_center: float
    z_radius: float
    ry: float
    rx: float
    cy: float
    cx: float
    drift: np.ndarray = field(compare=False)  # (slices, 2) integer offsets


def _place_structures(rng, n_slices, h, w, k, structures_per_class, radius_range,
                      z_extent, max_retries, subject_id):
    placed: list[_Structure] = []
    r_lo, r_hi = radius_range[0] * min(h, w), radius_range[1] * min(h, w)
    required = structures_per_class[0]
    counts = {cls: int(rng.integers(required, structures_per_class[1] + 1)) for cls in range(1, k)}
    # every class gets its required structures before any optional extra takes up room
    jobs = [(cls, i) for cls in counts for i in range(required)]
    jobs += [(cls, i) for cls, n in counts.items() for i in range(required, n)]
    for cls, i in jobs:
        zr = rng.uniform(z_extent[0], z_extent[1]) * n_slices
        zc = rng.uniform(0.15 * n_slices, 0.85 * n_slices)
        for attempt in range(max_retries):
            if attempt:
                zc = rng.uniform(0.15 * n_slices, 0.85 * n_slices)
            # crowded slabs: narrow the radius range towards r_lo as retries pile up
            ry, rx = rng.uniform(r_lo, r_hi - (r_hi - r_lo) * attempt / max_retries, size=2)
            margin = max(ry, rx) + 2
            if 2 * margin >= min(h, w):
                continue
            cy = rng.uniform(margin, h - margin)
            cx = rng.uniform(margin, w - margin)
            # structures sharing slices must not touch, drift included
            ok = all(np.hypot(cy - s.cy, cx - s.cx) > max(ry, rx) + max(s.ry, s.rx) + 4
                     for s in placed if abs(zc - s.z_center) < zr + s.z_radius)
            if ok:
                break
        else:
            if i >= required:
                continue  # optional extra that does not fit
            raise GenerationError(
                f"could not place class-{cls} structure in subject {subject_id} "
                f"(slice {int(zc)}) after {max_retries} retries")
        # bounded random walk: each step moves <= 1 px per axis, total <= 2 px
        steps = rng.integers(-1, 2, size=(n_slices, 2))
        drift = np.clip(np.cumsum(steps, axis=0), -2, 2)
        placed.append(_Structure(cls, zc, zr, ry, rx, cy, cx, drift))
    return placed


def _render_labels(structures, n_slices, h, w, profile_power=2.0):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.zeros((n_slices, h, w), dtype=np.uint8)
    for z in range(n_slices):
        for s in structures:
            t = (z - s.z_center) / s.z_radius
            if abs(t) >= 1:
                continue
            scale = (1 - abs(t) ** profile_power) ** (1 / profile_power)
            cy, cx = s.cy + s.drift[z, 0], s.cx + s.drift[z, 1]
            inside = ((yy - cy) / (s.ry * scale)) ** 2 + ((xx - cx) / (s.rx * scale)) ** 2 <= 1
            labels[z][inside] = s.k
    return labels


def _render_intensity(labels, k, rng):
    """Source-domain appearance: dark textured background, brighter structures."""
    levels = np.concatenate([[0.25], np.linspace(0.7, 0.9, k - 1) if k > 2 else [0.7]])
    img = levels[labels].astype(np.float64)
    # low-frequency anatomy-like texture plus fine noise
    coarse = ndimage.gaussian_filter(rng.normal(0, 1, labels.shape), sigma=(0, 3, 3))
    coarse /= max(np.abs(coarse).max(), 1e-12)
    img += 0.05 * coarse + rng.normal(0, 0.03, labels.shape)
    img = ndimage.gaussian_filter(img, sigma=(0, 0.6, 0.6))
    return np.clip(img, 0.0, 1.0)


def synthesize_subject(seed, slices_per_subject, h, w, k, *, structures_per_class=(1, 2),
                       radius_range=(0.1, 0.17), z_extent=(0.3, 0.45), profile_power=4.0,
                       max_retries=200, subject_id="s"):
    """Render one source-appearance subject. Returns ``(pixels, labels)`` of shape (D, H, W).

    Structures are superellipsoids: ``profile_power=2`` gives plain ellipsoids,
    larger powers give flatter, disc-like profiles along the stack.
    Geometry and texture come from independent streams spawned from ``seed``,
    so equal seeds give identical masks whatever happens to the intensities.
    """
    geo_ss, tex_ss = np.random.SeedSequence(seed).spawn(2)
    structures = _place_structures(np.random.default_rng(geo_ss), slices_per_subject, h, w, k,
                                   structures_per_class, radius_range, z_extent, max_retries,
                                   subject_id)
    labels = _render_labels(structures, slices_per_subject, h, w, profile_power)
    pixels = _render_intensity(labels, k, np.random.default_rng(tex_ss))
    return pixels, labels


def _bias_field(rng, shape):
    d, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    field = np.zeros((h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        field += np.cos(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
    field /= max(np.abs(field).max(), 1e-12)
    return np.broadcast_to(field, shape)


def apply_shift(pixels, shift: ShiftSpec, rng=None):
    """Map source-appearance intensities into the target domain."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if shift.is_identity:
        return pixels.copy()
    rng = np.random.default_rng(shift.seed) if rng is None else rng
    out = shift.contrast_gain * pixels + shift.contrast_bias
    if shift.invert:
        out = 1.0 - out
    if shift.bias_field_amplitude > 0:
        out = out + shift.bias_field_amplitude * _bias_field(rng, out.shape)
    if shift.noise_std > 0:
        out = out + rng.normal(0, shift.noise_std, out.shape)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestEntry:
    subject: str
    slice: int
    domain: str
    tags: np.ndarray | None
    image: str | None = None
    mask: str | None = None
    eval_only_mask: bool = False
    pixels: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def slice_id(self) -> str:
        return f"{self.domain}/{self.subject}/{self.slice}"

    def to_json(self) -> dict:
        return {
            "image": self.image, "mask": self.mask,
            "tags": None if self.tags is None else [bool(t) for t in self.tags],
            "subject": self.subject, "slice": int(self.slice), "domain": self.domain,
            "eval_only_mask": bool(self.eval_only_mask),
        }


@dataclass
class DatasetManifest:
    k: int
    split: str
    entries: list[ManifestEntry]

    def __len__(self):
        return len(self.entries)

    @property
    def domain(self) -> str:
        domains = {e.domain for e in self.entries}
        return domains.pop() if len(domains) == 1 else "mixed"

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries[0].pixels.shape

    def subjects(self) -> list[str]:
        return list(dict.fromkeys(e.subject for e in self.entries))

    def subset(self, subjects: Iterable[str], split: str) -> "DatasetManifest":
        keep = set(subjects)
        return DatasetManifest(self.k, split, [replace(e) for e in self.entries if e.subject in keep])

    def without_tags(self) -> "DatasetManifest":
        return DatasetManifest(self.k, self.split, [replace(e, tags=None) for e in self.entries])

    def to_json(self) -> dict:
        return {"k": self.k, "split": self.split, "entries": [e.to_json() for e in self.entries]}

    def validate(self):
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        shape = None
        for e in self.entries:
            if e.domain not in DOMAINS:
                raise ManifestError(f"{e.slice_id}: unknown domain {e.domain!r}")
            if e.pixels is None:
                raise ManifestError(f"{e.slice_id}: no pixel data")
            shape = shape or e.pixels.shape
            if e.pixels.shape != shape:
                raise ManifestError(f"{e.slice_id}: shape {e.pixels.shape} != {shape}")
            if e.domain == "source" and self.split == "train" and e.labels is None:
                raise ManifestError(f"{e.slice_id}: source-train entry without mask")
            if e.labels is not None:
                if e.labels.shape != e.pixels.shape:
                    raise ManifestError(f"{e.slice_id}: mask shape {e.labels.shape} "
                                        f"!= image shape {e.pixels.shape}")
                if e.labels.max(initial=0) >= self.k:
                    raise ManifestError(f"{e.slice_id}: label >= k={self.k}")
            if e.tags is not None:
                if len(e.tags) != self.k:
                    raise ManifestError(f"{e.slice_id}: tag vector length {len(e.tags)} != k")
                if not e.tags[0]:
                    raise ManifestError(f"{e.slice_id}: background tag must be true")
        return self


def generate_synthetic(num_subjects, slices_per_subject, H, W, K, shift, seed, *,
                       split="train", **geometry):
    """Build matching source and target manifests held in memory.

    Source and target subjects are drawn independently (non-aligned) from the
    same geometry distribution; only the target passes through ``shift``.
    ``geometry`` is forwarded to :func:`synthesize_subject`.
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    if min(num_subjects, slices_per_subject, H, W) <= 0:
        raise ValueError("sizes must be positive")
    shift = resolve_shift(shift)
    root = np.random.SeedSequence(seed)
    src_seeds, tgt_seeds = (s.generate_state(num_subjects) for s in root.spawn(2))
    shift_rng = np.random.default_rng([shift.seed, seed])

    out = {}
    for domain, seeds in (("source", src_seeds), ("target", tgt_seeds)):
        entries = []
        for j, sub_seed in enumerate(seeds):
            sid = f"{domain[0]}{j:03d}"
            pixels, labels = synthesize_subject(int(sub_seed), slices_per_subject, H, W, K,
                                                subject_id=sid, **geometry)
            if domain == "target":
                pixels = apply_shift(pixels, shift, shift_rng)
            for z in range(slices_per_subject):
                entries.append(ManifestEntry(
                    subject=sid, slice=z, domain=domain,
                    tags=tags_from_mask(labels[z], K),
                    eval_only_mask=domain == "target",
                    pixels=pixels[z].astype(np.float32), labels=labels[z].copy()))
        out[domain] = DatasetManifest(K, split, entries).validate()
    return out["source"], out["target"]


def split_by_subject(manifest: DatasetManifest, fractions: dict[str, float]) -> dict[str, DatasetManifest]:
    """Partition subjects in order into named splits (e.g. train/val/test)."""
    subjects = manifest.subjects()
    n = len(subjects)
    names = list(fractions)
    counts = [int(round(fractions[s] * n)) for s in names]
    counts[0] += n - sum(counts)
    out, start = {}, 0
    for name, c in zip(names, counts):
        out[name] = manifest.subset(subjects[start:start + c], name)
        start += c
    return out


def write_manifest(manifest: DatasetManifest, out_dir, name=None) -> Path:
    """Write slices as 16-bit PNG, masks as 8-bit PNG, plus the JSON manifest."""
    out_dir = Path(out_dir)
    name = name or f"{manifest.domain}_{manifest.split}"
    img_dir = out_dir / name
    img_dir.mkdir(parents=True, exist_ok=True)
    for e in manifest.entries:
        stem = f"{e.subject}_{e.slice:04d}"
        img = np.round(np.clip(e.pixels, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(img).save(img_dir / f"{stem}_img.png")
        e.image = f"{name}/{stem}_img.png"
        if e.labels is not None:
            Image.fromarray(e.labels.astype(np.uint8)).save(img_dir / f"{stem}_mask.png")
            e.mask = f"{name}/{stem}_mask.png"
    path = out_dir / f"{name}.json"
    path.write_text(json.dumps(manifest.to_json(), indent=1))
    return path


_ENTRY_KEYS = {"image", "mask", "tags", "subject", "slice", "domain", "eval_only_mask"}


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest JSON and eagerly load and validate every referenced file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or not {"k", "split", "entries"} <= raw.keys():
        raise ManifestError(f"{path}: manifest needs 'k', 'split' and 'entries'")
    k = raw["k"]
    if not isinstance(k, int) or k < 2:
        raise ManifestError(f"{path}: 'k' must be an integer >= 2")
    base = path.parent
    entries = []
    for i, r in enumerate(raw["entries"]):
        missing = {"image", "subject", "slice", "domain"} - r.keys()
        if missing or not r.keys() <= _ENTRY_KEYS:
            raise ManifestError(f"{path}: entry {i} missing {sorted(missing)} "
                                f"or has unknown keys {sorted(r.keys() - _ENTRY_KEYS)}")
        pixels = _read_png(base / r["image"]).astype(np.float32) / 65535.0
        labels = _read_png(base / r["mask"]).astype(np.uint8) if r.get("mask") else None
        tags = None if r.get("tags") is None else np.asarray(r["tags"], dtype=bool)
        eval_only = bool(r.get("eval_only_mask", r["domain"] == "target"))
        if r["domain"] == "target" and labels is not None:
            eval_only = True
        entries.append(ManifestEntry(subject=str(r["subject"]), slice=int(r["slice"]),
                                     domain=r["domain"], tags=tags, image=r["image"],
                                     mask=r.get("mask"), eval_only_mask=eval_only,
                                     pixels=pixels, labels=labels))
    return DatasetManifest(k, raw["split"], entries).validate()


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(f"referenced file not found: {path}")
    with Image.open(path) as im:
        return np.array(im)


# ---------------------------------------------------------------------------
# tensor-side handle used by the trainer

class SliceData:
    """Stacked arrays of a manifest with counted, gated mask access.

    ``masks(idx)`` is the only way the trainer reaches labels; masks flagged
    eval-only raise unless ``allow_eval_only=True`` (the Oracle baseline and
    evaluation code pass it explicitly).  Every access is tallied in
    ``mask_reads`` keyed by purpose.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.k = manifest.k
        self.split = manifest.split
        self.domain = manifest.domain
        self.images = np.stack([e.pixels for e in manifest.entries]).astype(np.float32)
        self.slice_ids = [e.slice_id for e in manifest.entries]
        self.subjects = [e.subject for e in manifest.entries]
        self.slice_index = np.array([e.slice for e in manifest.entries])
        has_tags = all(e.tags is not None for e in manifest.entries)
        self.tags = np.stack([e.tags for e in manifest.entries]) if has_tags else None
        self._labels = [e.labels for e in manifest.entries]
        self._eval_only = np.array([e.eval_only_mask for e in manifest.entries])
        self.mask_reads: Counter[str] = Counter()

    def __len__(self):
        return len(self.images)

    @property
    def has_masks(self) -> bool:
        return all(lbl is not None for lbl in self._labels)

    def masks(self, idx: Sequence[int] | None = None, *, allow_eval_only=False, purpose="train"):
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        if not allow_eval_only and self._eval_only[idx].any():
            raise MaskAccessError(f"eval-only masks requested for training ({self.domain}/{self.split})")
        if any(self._labels[i] is None for i in idx):
            raise MaskAccessError(f"no mask available for some of {self.domain}/{self.split}")
        self.mask_reads[purpose] += len(idx)
        return np.stack([self._labels[i] for i in idx])

    def eval_masks(self, idx=None):
        return self.masks(idx, allow_eval_only=True, purpose="eval")

    def volumes(self):
        """Slice indices grouped per subject, sorted by slice position."""
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(self.subjects):
            groups.setdefault(s, []).append(i)
        return {s: sorted(ix, key=lambda i: self.slice_index[i]) for s, ix in groups.items()}


def manifest_summary(manifest: DatasetManifest) -> dict:
    k = manifest.k
    sizes = np.array([[ground_truth_size(e.labels, c) for c in range(k)]
                      for e in manifest.entries if e.labels is not None])
    return {"slices": len(manifest), "subjects": len(manifest.subjects()),
            "mean_size": sizes.mean(0).tolist() if len(sizes) else None,
            "positive_fraction": (sizes > 0).mean(0).tolist() if len(sizes) else None}

