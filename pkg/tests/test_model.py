import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from constradapt.bounds import compute_source_stats
from constradapt.data import DatasetManifest, ManifestEntry, SliceData, tags_from_mask
from constradapt.losses import ConstraintSet, adaptation_objective
from constradapt.model import (CheckpointError, SegmentationModel, SizeRegressor, count_parameters,
                               forward_segment, forward_size, load_checkpoint, predict,
                               read_checkpoint_header, save_checkpoint)
from constradapt.trainer import AdaptConfig, train_regressor


def test_simplex_on_zero_input():
    torch.manual_seed(0)
    p = forward_segment(SegmentationModel(3), np.zeros((2, 16, 16), np.float32))
    assert p.shape == (2, 3, 16, 16)
    assert (p >= 0).all() and (p <= 1).all()
    assert (p.sum(1) - 1).abs().max() < 1e-5


@given(st.integers(0, 10_000), st.floats(-5, 5))
@settings(max_examples=15, deadline=None)
def test_simplex_any_input(seed, scale):
    torch.manual_seed(seed)
    x = torch.randn(2, 1, 8, 12) * scale
    assert (SegmentationModel(2)(x).sum(1) - 1).abs().max() < 1e-5


def test_inference_determinism_and_train_mode_restored():
    torch.manual_seed(0)
    m = SegmentationModel(2).train()
    x = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    a, b = predict(m, x), predict(m, x)
    assert torch.equal(a, b)
    assert m.training


def test_batch_independence():
    # GroupNorm statistics are per sample, so batching does not mix slices
    torch.manual_seed(0)
    m = SegmentationModel(2)
    x = torch.rand(4, 1, 16, 16)
    full = m(x)
    assert torch.allclose(full[1:2], m(x[1:2]), atol=1e-6)


def test_shape_contract_errors():
    m = SegmentationModel(2)
    with pytest.raises(ValueError):
        m(torch.zeros(1, 1, 10, 16))
    with pytest.raises(ValueError):
        m(torch.zeros(1, 2, 16, 16))
    with pytest.raises(ValueError):
        forward_segment(m, [np.zeros((8, 8)), np.zeros((12, 8))])
    with pytest.raises(ValueError):
        forward_size(SizeRegressor(2), torch.zeros(16, 16))


def test_parameter_count_is_compact():
    assert count_parameters(SegmentationModel(2)) < 500_000
    assert count_parameters(SizeRegressor(4)) < 500_000


def test_regressor_nonnegative_and_deterministic():
    torch.manual_seed(0)
    r = SizeRegressor(3)
    x = torch.randn(5, 1, 16, 16) * 10
    out = forward_size(r, x)
    assert out.shape == (5, 2) and (out >= 0).all()
    assert torch.equal(predict(r, x[:, 0]), predict(r, x[:, 0]))


def test_finite_difference_gradients_of_adaptation_objective():
    torch.manual_seed(3)
    m = SegmentationModel(2, width=4, groups=2).double()
    rng = np.random.default_rng(3)
    xs = torch.from_numpy(rng.random((2, 1, 8, 8)))
    xt = torch.from_numpy(rng.random((2, 1, 8, 8)))
    ys = rng.integers(0, 2, (2, 8, 8))
    cs = ConstraintSet(["a", "b"], [[0, 30], [0, 0]], [[0, 40], [0, 0]],
                       [[False, True], [False, True]])

    def loss():
        return adaptation_objective(m(xs), ys, m(xt), ["a", "b"], 0.01, cs)

    m.zero_grad()
    loss().backward()
    params = list(m.parameters())
    sizes = np.array([p.numel() for p in params])
    checked = 0
    h = 1e-6
    for _ in range(30):
        pi = rng.choice(len(params), p=sizes / sizes.sum())
        p = params[pi]
        j = int(rng.integers(p.numel()))
        g = p.grad.view(-1)[j].item()
        with torch.no_grad():
            flat = p.data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = loss().item()
            flat[j] = orig - h
            down = loss().item()
            flat[j] = orig
        fd = (up - down) / (2 * h)
        if abs(fd) < 1e-7 and abs(g) < 1e-7:
            continue
        assert abs(fd - g) / max(abs(fd), abs(g)) < 1e-3, (pi, j, fd, g)
        checked += 1
    assert checked >= 20


@pytest.mark.parametrize("factory", [lambda: SegmentationModel(3, width=4), lambda: SizeRegressor(3)])
def test_checkpoint_round_trip(tmp_path, factory):
    torch.manual_seed(0)
    m = factory()
    path = save_checkpoint(m, tmp_path / "m.ckpt")
    header = read_checkpoint_header(path)
    assert {"arch", "k", "param_count", "created_at"} <= header.keys()
    assert header["k"] == 3
    back = load_checkpoint(path, k=3)
    for a, b in zip(m.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    x = torch.rand(2, 16, 16)
    assert torch.equal(predict(m, x), predict(back, x))


def test_checkpoint_wrong_k_and_arch(tmp_path):
    path = save_checkpoint(SegmentationModel(2), tmp_path / "m.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, k=3)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, arch="sizecnn")


def test_checkpoint_corruption(tmp_path):
    path = save_checkpoint(SegmentationModel(2), tmp_path / "m.ckpt")
    blob = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "truncated").write_bytes(blob[: len(blob) // 2])
    (tmp_path / "header").write_bytes(blob[:14] + b"\xff" * 10 + blob[24:])
    for name in ("bad_magic", "truncated", "header"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


def _constant_size_data(n=48, size=32, side=5, seed=0):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        labels = np.zeros((size, size), np.uint8)
        y, x = rng.integers(2, size - side - 2, 2)
        labels[y:y + side, x:x + side] = 1
        pixels = (0.25 + 0.5 * labels + rng.normal(0, 0.03, labels.shape)).clip(0, 1)
        entries.append(ManifestEntry(f"s{i // 8}", i % 8, "source", tags_from_mask(labels, 2),
                                     pixels=pixels.astype(np.float32), labels=labels))
    return SliceData(DatasetManifest(2, "train", entries).validate())


def test_regressor_learns_constant_size():
    data = _constant_size_data()
    stats = compute_source_stats(data)
    assert stats.median[1] == 25
    torch.manual_seed(0)
    cfg = AdaptConfig(regressor_epochs=40, regressor_optimizer="adam", lr_reg=1e-3, batch_size=12)
    reg, rec = train_regressor(SizeRegressor(2), data, None, stats, cfg)
    est = predict(reg, _constant_size_data(seed=1).images).numpy()[:, 0]
    assert abs(np.median(est) - 25) <= 5
