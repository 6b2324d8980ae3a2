"""Compact segmentation network, size regressor and checkpoint files."""
from __future__ import annotations

import io
import json
import struct
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"CDACKPT1"


class CheckpointError(RuntimeError):
    """Unreadable checkpoint or one built for a different architecture."""


def _block(c_in, c_out, groups):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.GroupNorm(groups, c_out),
        nn.ReLU(inplace=True),
    )


class SegmentationModel(nn.Module):
    """Three-level encoder-decoder with skip connections and a softmax head.

    ``forward`` returns class probabilities of shape (B, K, H, W), never logits.
    H and W must be divisible by 4.
    """

    arch_id = "unet3"

    def __init__(self, k: int = 2, width: int = 8, groups: int = 4):
        super().__init__()
        self.k, self.width, self.groups = k, width, groups
        w = width
        self.enc1 = _block(1, w, groups)
        self.enc2 = _block(w, 2 * w, groups)
        self.enc3 = _block(2 * w, 4 * w, groups)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = _block(4 * w, 2 * w, groups)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = _block(2 * w, w, groups)
        self.head = nn.Conv2d(w, k, 1)

    @property
    def descriptor(self) -> dict:
        return {"arch": self.arch_id, "k": self.k, "width": self.width, "groups": self.groups}

    def logits(self, x):
        _check_input(x, multiple=4)
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], 1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], 1))
        return self.head(d1)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


class SizeRegressor(nn.Module):
    """Strided CNN, global average pooling, softplus head: K-1 sizes in pixels.

    The input is standardised per image first, which discards global gain and
    offset (they carry no size information).
    The head predicts a fraction of the image area so that pixel-scale targets
    do not need a huge final weight; outputs are multiplied back by H*W.
    """

    arch_id = "sizecnn"

    def __init__(self, k: int = 2, width: int = 16):
        super().__init__()
        self.k, self.width = k, width
        w = width
        self.features = nn.Sequential(
            nn.InstanceNorm2d(1),
            nn.Conv2d(1, w, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(nn.Linear(4 * w, 2 * w), nn.ReLU(inplace=True),
                                  nn.Linear(2 * w, k - 1))

    @property
    def descriptor(self) -> dict:
        return {"arch": self.arch_id, "k": self.k, "width": self.width}

    def forward(self, x):
        _check_input(x, multiple=1)
        h = self.features(x).mean(dim=(2, 3))
        area = x.shape[-1] * x.shape[-2]
        # softplus(z) / 20 keeps the initial output near 3.5% of the area
        return F.softplus(self.head(h)) * (area / 20.0)


def _check_input(x, multiple):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected a (B, 1, H, W) batch, got {tuple(x.shape)}")
    if x.shape[-1] % multiple or x.shape[-2] % multiple:
        raise ValueError(f"H and W must be multiples of {multiple}, got {tuple(x.shape[-2:])}")


def as_batch(slices) -> torch.Tensor:
    """Stack an array (B, H, W), a list of equal-shape arrays, or Slice2D objects."""
    if isinstance(slices, torch.Tensor):
        x = slices
    else:
        arrays = [getattr(s, "pixels", s) for s in slices]
        shapes = {tuple(a.shape) for a in arrays}
        if len(shapes) != 1:
            raise ValueError(f"slice shapes differ within batch: {sorted(shapes)}")
        x = torch.as_tensor(np.stack(arrays))
    x = x.float()
    if x.ndim == 3:
        x = x.unsqueeze(1)
    return x


def forward_segment(model: SegmentationModel, slices):
    return model(as_batch(slices))


def forward_size(regressor: SizeRegressor, slices):
    return regressor(as_batch(slices))


@torch.no_grad()
def predict(model: nn.Module, images, batch_size=64):
    """Inference-mode forward over an (N, H, W) array, returned as a tensor."""
    was_training = model.training
    model.eval()
    x = as_batch(images)
    out = torch.cat([model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    model.train(was_training)
    return out


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


_ARCHS = {SegmentationModel.arch_id: SegmentationModel, SizeRegressor.arch_id: SizeRegressor}


def save_checkpoint(model: nn.Module, path) -> Path:
    """Magic bytes, uint32 header length, JSON header, then the torch state dict."""
    header = dict(model.descriptor, param_count=count_parameters(model),
                  created_at=time.strftime("%Y-%m-%dT%H:%M:%S"))
    buf = io.BytesIO()
    torch.save(model.state_dict(), buf)
    head = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + buf.getvalue())
    return path


def read_checkpoint_header(path) -> dict:
    return _split_checkpoint(Path(path).read_bytes())[0]


def _split_checkpoint(blob: bytes):
    if not blob.startswith(CHECKPOINT_MAGIC) or len(blob) < len(CHECKPOINT_MAGIC) + 4:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (n,) = struct.unpack("<I", blob[off:off + 4])
    try:
        header = json.loads(blob[off + 4:off + 4 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    return header, blob[off + 4 + n:]


def load_checkpoint(path, *, k: int | None = None, arch: str | None = None) -> nn.Module:
    """Rebuild the module described by the header; ``k``/``arch`` guard against mix-ups."""
    header, payload = _split_checkpoint(Path(path).read_bytes())
    if arch is not None and header.get("arch") != arch:
        raise CheckpointError(f"checkpoint holds {header.get('arch')!r}, expected {arch!r}")
    if k is not None and header.get("k") != k:
        raise CheckpointError(f"checkpoint built for K={header.get('k')}, expected K={k}")
    cls = _ARCHS.get(header.get("arch"))
    if cls is None:
        raise CheckpointError(f"unknown architecture {header.get('arch')!r}")
    kwargs = {key: v for key, v in header.items() if key in ("k", "width", "groups")}
    try:
        state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
        model = cls(**kwargs)
        model.load_state_dict(state)
    except Exception as exc:
        raise CheckpointError(f"corrupted checkpoint payload: {exc}") from exc
    if count_parameters(model) != header.get("param_count"):
        raise CheckpointError("parameter count does not match header")
    return model

