"""Central finite differences against autograd for every loss, on random 8x8, K=3 inputs."""
import numpy as np
import pytest
import torch

from constradapt.losses import (ConstraintSet, LabelDistributionPrior, adaptation_objective,
                                cross_entropy, dice_loss, kl_matching_loss, regressor_l2_loss,
                                size_penalty, supervised_loss, tag_penalty, total_penalty)

K, H, W = 3, 8, 8
N_INSTANCES = 50
H_STEP = 1e-4
REL_TOL = 1e-4


def _instance(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(0, 1.5, (2, K, H, W)))
    mask = rng.integers(0, K, (2, H, W))
    # bounds straddle the current soft sizes so both hinge sides are exercised
    sizes = torch.softmax(logits, 1).sum((2, 3)).numpy()
    lower = np.clip(sizes + rng.uniform(-15, 5, sizes.shape), 0, None)
    upper = lower + rng.uniform(0, 10, sizes.shape)
    cs = ConstraintSet(["a", "b"], lower, upper, np.ones((2, K), bool))
    prior = LabelDistributionPrior(["a", "b"], rng.dirichlet(np.ones(K), 2))
    return logits, mask, cs, prior, rng


def _losses(mask, cs, prior, rng):
    reg_target = torch.from_numpy(rng.uniform(0, 64, (2, K)))
    present = bool(rng.integers(2))
    bounds = tuple(cs.bounds("a", 1))
    return {
        "cross_entropy": lambda p: cross_entropy(p, mask),
        "dice": lambda p: dice_loss(p, mask),
        "dice+ce": lambda p: supervised_loss(p, mask, "Dice+CE"),
        "size_penalty": lambda p: size_penalty(p[0], 1, bounds),
        "tag_penalty": lambda p: tag_penalty(p[1], 2, present),
        "total_penalty": lambda p: total_penalty(p, ["a", "b"], cs),
        "kl_prior_pred": lambda p: kl_matching_loss(p, prior.batch(["a", "b"], torch.float64)),
        "kl_pred_prior": lambda p: kl_matching_loss(p, prior.batch(["a", "b"], torch.float64), "pred||prior"),
        "regressor_l2": lambda p: regressor_l2_loss(p.sum((2, 3)), reg_target),
        "objective": lambda p: adaptation_objective(p[:1], mask[:1], p[1:], ["b"], 0.1, cs),
    }


def max_relative_error(fn, logits, rng, n_coords=6):
    z = logits.clone().requires_grad_(True)
    fn(torch.softmax(z, 1)).backward()
    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(rng.integers(s)) for s in z.shape)
        with torch.no_grad():
            zp, zm = logits.clone(), logits.clone()
            zp[idx] += H_STEP
            zm[idx] -= H_STEP
            fd = (fn(torch.softmax(zp, 1)) - fn(torch.softmax(zm, 1))).item() / (2 * H_STEP)
        g = z.grad[idx].item()
        scale = max(abs(fd), abs(g))
        if scale > 1e-8:
            worst = max(worst, abs(fd - g) / scale)
    return worst


def gradient_report(n_instances=N_INSTANCES):
    """Worst relative error per loss over ``n_instances`` random inputs."""
    worst = {}
    for seed in range(n_instances):
        logits, mask, cs, prior, rng = _instance(seed)
        for name, fn in _losses(mask, cs, prior, rng).items():
            worst[name] = max(worst.get(name, 0.0), max_relative_error(fn, logits, rng))
    return worst


def test_all_losses_match_finite_differences():
    worst = gradient_report()
    bad = {k: v for k, v in worst.items() if v >= REL_TOL}
    assert not bad, bad


@pytest.mark.parametrize("seed", range(3))
def test_penalty_gradient_points_back_into_interval(seed):
    logits, mask, cs, prior, rng = _instance(seed)
    p = torch.softmax(logits, 1).requires_grad_(True)
    size_penalty(p[0], 1, (0.0, 1.0)).backward()
    # too large: descent direction lowers class-1 probability everywhere
    assert (p.grad[0, 1] >= 0).all()
