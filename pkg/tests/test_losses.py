import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from constradapt.losses import (ConstraintConfigError, ConstraintSet, LabelDistributionPrior,
                                SizeBounds, adaptation_objective, cross_entropy, dice_loss,
                                kl_matching_loss, regressor_l2_loss, size_penalty, soft_size,
                                soft_sizes, tag_penalty, total_penalty)


def onehot(mask, k):
    m = torch.as_tensor(mask).long()
    return torch.nn.functional.one_hot(m, k).permute(2, 0, 1).double()


def random_simplex(shape, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(*shape, generator=g, dtype=dtype) * 2, dim=-3)


def pred_with_size(size, k=2, h=16, w=16):
    """Background/foreground prediction whose class-1 soft size is ``size``."""
    p1 = torch.full((h, w), size / (h * w), dtype=torch.float64)
    return torch.stack([1 - p1, p1])


# --- cross entropy -----------------------------------------------------------

def test_ce_perfect_prediction_is_zero():
    mask = np.random.default_rng(0).integers(0, 3, (6, 6))
    assert cross_entropy(onehot(mask, 3), mask).item() == pytest.approx(0.0, abs=1e-6)


def test_ce_uniform_two_classes_is_ln2():
    mask = np.random.default_rng(1).integers(0, 2, (4, 4))
    pred = torch.full((2, 4, 4), 0.5, dtype=torch.float64)
    assert cross_entropy(pred, mask).item() == pytest.approx(math.log(2), abs=1e-12)


def test_ce_quarter_mass_on_true_class_is_ln4():
    mask = np.zeros((4, 4), dtype=int)
    pred = torch.full((4, 4, 4), 0.25, dtype=torch.float64)
    assert cross_entropy(pred, mask).item() == pytest.approx(math.log(4), abs=1e-12)


def test_ce_shape_mismatch():
    with pytest.raises(ValueError):
        cross_entropy(torch.full((2, 4, 4), 0.5), np.zeros((5, 4), dtype=int))


# --- dice --------------------------------------------------------------------

def test_dice_perfect_match_near_zero():
    mask = np.zeros((8, 8), dtype=int)
    mask[2:5, 2:6] = 1
    # eps smoothing leaves only rounding-level loss
    assert dice_loss(onehot(mask, 2), mask).item() == pytest.approx(0.0, abs=1e-12)


def test_dice_uniform_half_half_4x4():
    mask = np.zeros((4, 4), dtype=int)
    mask[:, 2:] = 1
    pred = torch.full((2, 4, 4), 0.5, dtype=torch.float64)
    # brute force: per class inter = 0.5 * 8, sums = 8 + 8, with eps = 1
    inter = sum(0.5 for i in range(4) for j in range(2, 4))
    per_class = (2 * inter + 1) / (0.5 * 16 + 8 + 1)
    assert per_class == pytest.approx(9 / 17)
    assert dice_loss(pred, mask).item() == pytest.approx(1 - per_class, abs=1e-12)
    # without smoothing the per-class Dice is exactly one half
    assert dice_loss(pred, mask, eps=0.0).item() == pytest.approx(0.5, abs=1e-12)


def test_dice_both_empty_foreground_contributes_nothing():
    mask = np.zeros((4, 4), dtype=int)
    pred = onehot(mask, 2)
    assert dice_loss(pred, mask).item() == pytest.approx(0.0, abs=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_dice_in_unit_interval(seed):
    pred = random_simplex((3, 5, 5), seed)
    mask = np.random.default_rng(seed).integers(0, 3, (5, 5))
    assert 0.0 <= dice_loss(pred, mask).item() <= 1.0


# --- soft size ---------------------------------------------------------------

def test_soft_size_of_one_hot_counts_pixels():
    mask = np.zeros((5, 5), dtype=int)
    mask.flat[[0, 3, 7, 11, 12, 20, 24]] = 1
    assert soft_size(onehot(mask, 2), 1).item() == 7.0


def test_soft_size_uniform_4x4():
    pred = torch.full((2, 4, 4), 0.5)
    assert soft_size(pred, 0).item() == 8.0
    assert soft_size(pred, 1).item() == 8.0


def test_soft_size_matches_pixel_loop():
    pred = random_simplex((3, 6, 7), 3)
    for k in range(3):
        brute = 0.0
        for i in range(6):
            for j in range(7):
                brute += float(pred[k, i, j])
        assert soft_size(pred, k).item() == pytest.approx(brute, abs=1e-6)


# --- size penalty -------------------------------------------------------------

@pytest.mark.parametrize("size,expected", [(100, 0.0), (120, 100.0), (80, 100.0)])
def test_size_penalty_examples(size, expected):
    pred = pred_with_size(size)
    assert size_penalty(pred, 1, SizeBounds(90, 110)).item() == pytest.approx(expected, rel=1e-9)


@given(st.floats(0.01, 0.99), st.floats(0, 100), st.floats(1, 100))
@settings(max_examples=60, deadline=None)
def test_size_penalty_dead_zone_has_zero_value_and_gradient(frac, lo, width):
    # strictly interior sizes; on the boundary itself summation rounding can leave ~1e-29
    hi = lo + width
    size = lo + frac * width
    pred = pred_with_size(size, h=16, w=16).requires_grad_(True)
    pen = size_penalty(pred, 1, (lo, hi))
    pen.backward()
    assert pen.item() == 0.0
    assert torch.count_nonzero(pred.grad) == 0


@given(st.floats(0.1, 50))
@settings(max_examples=40, deadline=None)
def test_size_penalty_quadratic_growth(d):
    lo, hi = 40.0, 80.0
    p1 = size_penalty(pred_with_size(hi + d), 1, (lo, hi)).item()
    p2 = size_penalty(pred_with_size(hi + 2 * d), 1, (lo, hi)).item()
    assert p2 == pytest.approx(4 * p1, rel=1e-9)


@given(st.floats(0, 60), st.floats(0, 60))
@settings(max_examples=40, deadline=None)
def test_size_penalty_monotone_outside_interval(d1, d2):
    lo, hi = 100.0, 150.0
    a, b = sorted([d1, d2])
    assert (size_penalty(pred_with_size(hi + a), 1, (lo, hi))
            <= size_penalty(pred_with_size(hi + b), 1, (lo, hi)) + 1e-9)
    assert (size_penalty(pred_with_size(lo - a * 1.5), 1, (lo, hi))
            <= size_penalty(pred_with_size(lo - b * 1.5), 1, (lo, hi)) + 1e-9)


def test_size_bounds_validation():
    with pytest.raises(ValueError):
        SizeBounds(10, 5)
    with pytest.raises(ValueError):
        SizeBounds(-1, 5)


# --- tag penalty --------------------------------------------------------------

def test_tag_penalty_examples():
    assert tag_penalty(pred_with_size(3.0), 1, present=False).item() == pytest.approx(9.0)
    assert tag_penalty(pred_with_size(0.0), 1, present=False).item() == 0.0
    assert tag_penalty(pred_with_size(1.5), 1, present=True).item() == 0.0
    assert tag_penalty(pred_with_size(0.5), 1, present=True).item() == pytest.approx(0.25)


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_absent_tag_equals_zero_bounds(seed):
    pred = random_simplex((3, 6, 6), seed)
    for k in (1, 2):
        a = tag_penalty(pred, k, present=False).item()
        assert a == pytest.approx(size_penalty(pred, k, (0.0, 0.0)).item(), rel=1e-12)
        assert a == pytest.approx(soft_size(pred, k).item() ** 2, rel=1e-12)


# --- total penalty -------------------------------------------------------------

def test_total_penalty_empty_set_is_zero():
    pred = random_simplex((2, 2, 4, 4), 0)
    assert total_penalty(pred, ["a", "b"], ConstraintSet.empty(2)).item() == 0.0


def test_total_penalty_additive():
    preds = torch.stack([pred_with_size(120), pred_with_size(85)])
    cs = ConstraintSet(["a", "b"], [[0, 90], [0, 90]], [[0, 110], [0, 110]],
                       [[False, True], [False, True]])
    assert total_penalty(preds, ["a", "b"], cs).item() == pytest.approx(125.0)
    # order of the batch does not matter
    assert total_penalty(preds.flip(0), ["b", "a"], cs).item() == pytest.approx(125.0)


def test_total_penalty_matches_constraint_loop():
    rng = np.random.default_rng(5)
    n, k = 6, 3
    ids = [f"t/{i}" for i in range(n)]
    lower = rng.uniform(0, 15, (n, k))
    upper = lower + rng.uniform(0, 10, (n, k))
    active = rng.random((n, k)) < 0.7
    cs = ConstraintSet(ids, lower, upper, active)
    preds = random_simplex((n, k, 6, 6), 9)
    batch_ids = [ids[i] for i in (4, 1, 3)]
    got = total_penalty(preds[[4, 1, 3]], batch_ids, cs).item()
    brute = 0.0
    for b, sid in enumerate(batch_ids):
        i = ids.index(sid)
        for c in range(k):
            if not active[i, c]:
                continue
            s = float(preds[[4, 1, 3][b], c].sum())
            brute += max(0.0, s - upper[i, c]) ** 2 + max(0.0, lower[i, c] - s) ** 2
    assert got == pytest.approx(brute, abs=1e-6)


def test_total_penalty_unknown_slice():
    cs = ConstraintSet(["a"], [[0, 1]], [[0, 2]])
    with pytest.raises(ConstraintConfigError):
        total_penalty(random_simplex((1, 2, 4, 4), 0), ["zzz"], cs)


def test_constraint_set_json_round_trip(tmp_path):
    cs = ConstraintSet(["a", "b"], [[0, 9.5], [0, 0]], [[0, 11.0], [0, 0]],
                       [[False, True], [False, True]])
    cs.save(tmp_path / "c.json")
    back = ConstraintSet.load(tmp_path / "c.json", 2)
    assert back.to_json() == cs.to_json()
    assert cs.to_json()[0] == {"slice": "a", "class": 1, "lower": 9.5, "upper": 11.0}
    assert len(back) == 2


# --- adaptation objective --------------------------------------------------------

def _objective_inputs():
    mask = np.zeros((16, 16), dtype=int)
    mask[4:10, 4:10] = 1
    src = random_simplex((2, 2, 16, 16), 1)
    tgt = torch.stack([pred_with_size(120), pred_with_size(85)])
    cs = ConstraintSet(["a", "b"], [[0, 90], [0, 90]], [[0, 110], [0, 110]],
                       [[False, True], [False, True]])
    return src, np.stack([mask, mask]), tgt, cs


def test_objective_gamma_zero_is_bit_identical_to_ce():
    src, masks, tgt, cs = _objective_inputs()
    assert torch.equal(adaptation_objective(src, masks, tgt, ["a", "b"], 0.0, cs),
                       cross_entropy(src, masks))


def test_objective_linearity():
    src, masks, tgt, cs = _objective_inputs()
    ce = cross_entropy(src, masks).item()
    val = adaptation_objective(src, masks, tgt, ["a", "b"], 2.0, cs).item()
    assert val == pytest.approx(ce + 2 * 125.0, rel=1e-12)


def test_objective_satisfied_constraints_leave_supervised_term():
    src, masks, _, cs = _objective_inputs()
    tgt = torch.stack([pred_with_size(100), pred_with_size(95)])
    assert adaptation_objective(src, masks, tgt, ["a", "b"], 5.0, cs).item() == pytest.approx(
        cross_entropy(src, masks).item(), rel=1e-12)


def test_objective_dice_ce_variant():
    src, masks, tgt, cs = _objective_inputs()
    expected = cross_entropy(src, masks) + dice_loss(src, masks)
    got = adaptation_objective(src, masks, tgt, ["a", "b"], 0.0, cs, "Dice+CE")
    assert got.item() == pytest.approx(expected.item(), rel=1e-12)


def test_objective_rejects_negative_gamma():
    src, masks, tgt, cs = _objective_inputs()
    with pytest.raises(ValueError):
        adaptation_objective(src, masks, tgt, ["a", "b"], -1.0, cs)


# --- KL matching -------------------------------------------------------------------

def test_kl_zero_when_matching():
    pred = random_simplex((3, 4, 4), 2)
    q = (soft_sizes(pred)[0] / 16).detach()
    assert kl_matching_loss(pred, q).item() == pytest.approx(0.0, abs=1e-12)


def test_kl_hand_computed():
    pred = torch.stack([torch.full((4, 4), 0.25), torch.full((4, 4), 0.75)]).double()
    expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
    assert expected == pytest.approx(0.1438410362, abs=1e-9)
    assert kl_matching_loss(pred, [0.5, 0.5]).item() == pytest.approx(expected, abs=1e-12)


def test_kl_zero_prior_class_contributes_nothing():
    pred = random_simplex((3, 4, 4), 4)
    q = (soft_sizes(pred)[0] / 16).detach().numpy()
    prior = np.array([q[0] + q[2], q[1], 0.0])
    expected = sum(p * math.log(p / qq) for p, qq in zip(prior[:2], q[:2]))
    assert kl_matching_loss(pred, prior).item() == pytest.approx(expected, abs=1e-12)


def test_kl_nonnegative_both_directions():
    pred = random_simplex((4, 3, 6, 6), 8)
    prior = torch.softmax(torch.randn(4, 3, dtype=torch.float64), -1)
    assert kl_matching_loss(pred, prior).item() >= 0
    assert kl_matching_loss(pred, prior, "pred||prior").item() >= 0


def test_label_distribution_prior_background_completion():
    prior = LabelDistributionPrior.from_foreground(["a", "b"], [[0.2, 0.1], [0.0, 0.0]])
    np.testing.assert_allclose(prior.proportions, [[0.7, 0.2, 0.1], [1.0, 0.0, 0.0]])
    with pytest.raises(ConstraintConfigError):
        prior.batch(["c"])


# --- regressor L2 ------------------------------------------------------------------

def test_regressor_l2_examples():
    assert regressor_l2_loss(torch.tensor([3.0, 4.0]), torch.tensor([3.0, 4.0])).item() == 0.0
    assert regressor_l2_loss(torch.tensor([10.0, 0.0]), torch.tensor([7.0, 4.0])).item() == 25.0


def test_regressor_l2_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    brute = sum((a[i, j] - b[i, j]) ** 2 for i in range(5) for j in range(3))
    assert regressor_l2_loss(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(brute, abs=1e-6)
    with pytest.raises(ValueError):
        regressor_l2_loss(torch.zeros(3), torch.zeros(2))
