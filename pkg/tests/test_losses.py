import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from segflow.losses import UnsupervisableSample, combined_loss, epe_loss, fg_bg_weight, weighted_seg_loss
from tests.oracles import epe_oracle, seg_loss_oracle


def test_fg_weight_examples():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = 1
    assert fg_bg_weight(m) == 0.25
    assert fg_bg_weight(np.zeros((3, 3))) == 0.0
    assert fg_bg_weight(np.ones((3, 3))) == 1.0


def test_fg_weight_matches_count_loop():
    rng = np.random.default_rng(3)
    m = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
    count = 0
    for i in range(8):
        for j in range(8):
            count += int(m[i, j] == 1)
    assert fg_bg_weight(m) == pytest.approx(count / 64, abs=1e-15)


def test_seg_loss_perfect_prediction_is_zero():
    mask = torch.tensor([[1, 0], [0, 0]])
    logits = torch.zeros(2, 2, 2, dtype=torch.float64)
    logits[1] = torch.where(mask.bool(), 1e3, -1e3)
    logits[0] = -logits[1]
    assert weighted_seg_loss(logits, mask).item() == pytest.approx(0.0, abs=1e-12)


def test_seg_loss_uniform_logits_hand_value():
    mask = torch.tensor([[1, 0], [0, 0]])
    logits = torch.zeros(2, 2, 2, dtype=torch.float64)
    expected = 1.5 * math.log(2)
    assert weighted_seg_loss(logits, mask).item() == pytest.approx(expected, abs=1e-12)
    assert seg_loss_oracle(logits.numpy(), mask.numpy()) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(1.0397, abs=1e-4)


@pytest.mark.parametrize("seed", range(10))
def test_seg_loss_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(2, 8, 8))
    mask = (rng.uniform(size=(8, 8)) < 0.4).astype(np.int64)
    got = weighted_seg_loss(torch.from_numpy(logits), torch.from_numpy(mask)).item()
    assert got == pytest.approx(seg_loss_oracle(logits, mask), abs=1e-6)
    mean = weighted_seg_loss(torch.from_numpy(logits), torch.from_numpy(mask), reduction="mean").item()
    assert mean == pytest.approx(got / 64, abs=1e-9)


def test_seg_loss_rejects_bad_input():
    with pytest.raises(ValueError):
        weighted_seg_loss(torch.zeros(2, 4, 4), torch.zeros(4, 5))
    bad = torch.zeros(2, 4, 4)
    bad[0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        weighted_seg_loss(bad, torch.zeros(4, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_seg_loss_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    logits = torch.from_numpy(rng.normal(size=(2, 6, 6)))
    mask = torch.from_numpy((rng.uniform(size=(6, 6)) < 0.5).astype(np.int64))
    perm = torch.from_numpy(rng.permutation(36))
    pl = logits.reshape(2, -1)[:, perm].reshape(2, 6, 6)
    pm = mask.reshape(-1)[perm].reshape(6, 6)
    assert weighted_seg_loss(pl, pm).item() == pytest.approx(weighted_seg_loss(logits, mask).item(), rel=1e-12)


def test_epe_examples():
    gt = torch.randn(2, 5, 5, dtype=torch.float64)
    assert epe_loss(gt, gt).item() == 0.0
    assert epe_loss(gt + 1.0, gt).item() == pytest.approx(2.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_epe_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 2, 8, 8))
    valid = (rng.uniform(size=(8, 8)) < 0.7).astype(np.uint8)
    total, n = epe_oracle(pred, gt, valid)
    t = lambda a: torch.from_numpy(a)
    assert epe_loss(t(pred), t(gt), t(valid), reduction="sum").item() == pytest.approx(total, abs=1e-6)
    assert epe_loss(t(pred), t(gt), t(valid)).item() == pytest.approx(total / n, abs=1e-6)


def test_epe_no_valid_pixels():
    with pytest.raises(UnsupervisableSample):
        epe_loss(torch.zeros(2, 3, 3), torch.zeros(2, 3, 3), torch.zeros(3, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(-5, 5))
def test_epe_symmetry_and_shift_invariance(seed, cu, cv):
    rng = np.random.default_rng(seed)
    a, b = (torch.from_numpy(x) for x in rng.normal(size=(2, 2, 4, 4)))
    assert epe_loss(a, b).item() == pytest.approx(epe_loss(b, a).item(), rel=1e-12)
    shift = torch.tensor([cu, cv], dtype=torch.float64).view(2, 1, 1)
    assert epe_loss(a + shift, b + shift).item() == pytest.approx(epe_loss(a, b).item(), rel=1e-9, abs=1e-9)


def test_combined_loss():
    assert combined_loss(torch.tensor(2.0, dtype=torch.float64), torch.tensor(3.0, dtype=torch.float64), 0.1).item() \
        == pytest.approx(2.3, abs=1e-12)
    with pytest.raises(ValueError):
        combined_loss(2.0, 3.0, 0.0)
    with pytest.raises(ValueError):
        combined_loss(2.0, float("inf"), 0.1)


def test_combined_gradient_linear_in_lambda():
    torch.manual_seed(0)
    w = torch.randn(2, 4, 4, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 4, 4, dtype=torch.float64)
    seg = torch.tensor(1.7, dtype=torch.float64)  # independent of the flow parameters

    def grad(lam):
        w.grad = None
        combined_loss(seg, epe_loss(w, target), lam).backward()
        return w.grad.clone()

    g1, g2 = grad(0.1), grad(0.2)
    assert torch.allclose(g2, 2 * g1, rtol=1e-6, atol=0)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.normal(size=(2, 4, 4))).requires_grad_()
    mask = torch.from_numpy((rng.uniform(size=(4, 4)) < 0.4).astype(np.int64))
    flow = torch.from_numpy(rng.normal(size=(2, 4, 4))).requires_grad_()
    gt = torch.from_numpy(rng.normal(size=(2, 4, 4)))
    assert torch.autograd.gradcheck(lambda x: weighted_seg_loss(x, mask), (logits,), eps=1e-6, rtol=1e-3, atol=1e-8)
    assert torch.autograd.gradcheck(lambda x: epe_loss(x, gt), (flow,), eps=1e-6, rtol=1e-3, atol=1e-8)
