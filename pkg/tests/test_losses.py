import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cacdn.core_types import Modality
from cacdn.losses import LossConfig, combine, dice_loss, focal_loss, total_loss
from cacdn.network import ForwardOutput


def bce(p, y):
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def test_focal_hand_value():
    v = focal_loss(torch.tensor([0.5], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64), 2.0, 0.25)
    assert float(v) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert float(v) == pytest.approx(0.043322, abs=1e-6)


def test_focal_perfect_prediction_is_zero():
    mask = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert float(focal_loss(mask, mask)) < 1e-12


def test_focal_gamma0_is_half_bce():
    rng = np.random.default_rng(0)
    p = torch.tensor(rng.uniform(0.01, 0.99, (6, 6)))
    y = torch.tensor((rng.random((6, 6)) < 0.4).astype(float))
    assert float(focal_loss(p, y, gamma=0.0, alpha=0.5)) == pytest.approx(0.5 * float(bce(p, y)), rel=1e-12)


def test_dice_examples():
    mask = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert float(dice_loss(mask, mask)) == 0.0
    # no overlap, sum(prob) = sum(mask) = 2: 1 - 1 / (2 + 2 + 1)
    assert float(dice_loss(1 - mask, mask, 1.0)) == pytest.approx(0.8, abs=1e-7)
    z = torch.zeros(3, 3)
    assert float(dice_loss(z, z)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        focal_loss(torch.zeros(2, 2), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_combined_hand_value():
    t = lambda x: torch.tensor(x, dtype=torch.float64)
    bd = combine(t(0.2), t(0.3), t(0.1), t(0.4))
    assert float(bd.total) == pytest.approx(0.5, abs=1e-15)
    a = combine(t(0.2), t(0.3), t(0.1), t(0.4), LossConfig(beta=0.0))
    b = combine(t(0.2), t(0.3), t(0.1), t(9.0), LossConfig(beta=0.0))
    assert float(a.total) == float(b.total)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=4, max_size=4), st.floats(0, 5, allow_nan=False))
def test_decomposition(terms, beta):
    t = [torch.tensor(x, dtype=torch.float64) for x in terms]
    bd = combine(*t, LossConfig(beta=beta))
    recomputed = 0.6 * (terms[0] + terms[1]) + 0.4 * (terms[2] + beta * terms[3])
    assert abs(float(bd.total) - recomputed) <= 1e-12 * max(1.0, abs(recomputed))


def fake_output(prob, recons):
    return ForwardOutput(prob, recons, {})


def test_total_loss_vanishes_for_perfect_outputs():
    rng = np.random.default_rng(0)
    mask = torch.tensor((rng.random((2, 8, 8)) < 0.3).astype(np.float64))
    inputs = {m: torch.tensor(rng.random((2, c, 8, 8))) for m, c in
              ((Modality.S1_PRE, 2), (Modality.S1_POST, 2), (Modality.S2_PRE, 4))}
    out = fake_output(mask.clone(), {m: v.clone() for m, v in inputs.items()})
    assert float(total_loss(out, inputs, mask).total) < 1e-6
    with pytest.raises(ValueError):
        total_loss(out, inputs, None)


def test_total_loss_ablation_ignores_s2_terms():
    rng = np.random.default_rng(1)
    mask = torch.tensor((rng.random((1, 8, 8)) < 0.3).astype(np.float64))
    inputs = {m: torch.tensor(rng.random((1, c, 8, 8))) for m, c in
              ((Modality.S1_PRE, 2), (Modality.S1_POST, 2), (Modality.S2_PRE, 4))}
    recons = {m: torch.tensor(rng.random(v.shape)) for m, v in inputs.items()}
    prob = torch.tensor(rng.random((1, 8, 8)))
    no_s2 = {m: r for m, r in recons.items() if m is not Modality.S2_PRE}
    a = total_loss(fake_output(prob, recons), inputs, mask, use_s2=False)
    b = total_loss(fake_output(prob, no_s2), inputs, mask)
    assert float(a.total) == float(b.total)
    c = total_loss(fake_output(prob, recons), inputs, mask)
    assert float(c.l_ce) != float(a.l_ce)


def central_diff_check(fn, x, h=1e-6):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += h
        xm[i] -= h
        numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))) / (2 * h)
    return (analytic - numeric).norm() / numeric.norm()


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    mask = torch.tensor((rng.random((4, 4)) < 0.4).astype(np.float64))
    prob = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)))
    assert central_diff_check(lambda p: focal_loss(p, mask), prob) <= 1e-4
    assert central_diff_check(lambda p: dice_loss(p, mask), prob) <= 1e-4
    recon_t = torch.tensor(rng.random((1, 2, 4, 4)))
    recon_x = torch.tensor(rng.uniform(0.05, 0.95, (1, 2, 4, 4)))
    inputs = {Modality.S1_POST: recon_t}

    def full(p):
        return total_loss(fake_output(p, {Modality.S1_POST: recon_x}), inputs, mask).total

    assert central_diff_check(full, prob) <= 1e-4


def test_focal_decreases_toward_mask():
    rng = np.random.default_rng(5)
    mask = torch.tensor((rng.random((6, 6)) < 0.5).astype(np.float64))
    prob = torch.tensor(rng.uniform(0.05, 0.95, (6, 6)))
    prev = float(focal_loss(prob, mask))
    for step in np.linspace(0.1, 0.9, 9):
        moved = prob + step * (mask - prob)
        cur = float(focal_loss(moved, mask))
        assert cur < prev
        prev = cur


def test_losses_invariant_to_tiling_a_pattern():
    rng = np.random.default_rng(6)
    mask = torch.tensor((rng.random((4, 4)) < 0.4).astype(np.float64))
    prob = torch.tensor(rng.uniform(0.05, 0.95, (4, 4)))
    big_mask, big_prob = mask.repeat(3, 3), prob.repeat(3, 3)
    assert float(focal_loss(big_prob, big_mask)) == pytest.approx(float(focal_loss(prob, mask)), rel=1e-12)
