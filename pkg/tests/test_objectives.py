import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from cudgnet.objectives import (
    generator_adv_loss,
    info_nce,
    kl_diag_gaussian,
    mc_task_loss,
    soft_cross_entropy,
    total_loss,
)


def nce_double_loop(z, zp, temperature, exclude_positive=False):
    """Reference: explicit loops over the 2N anchors and their denominators."""
    views = [v / np.linalg.norm(v) for v in list(z) + list(zp)]
    n = len(z)
    total = 0.0
    for i in range(2 * n):
        p = (i + n) % (2 * n)
        num = math.exp(float(views[i] @ views[p]) / temperature)
        den = 0.0
        for j in range(2 * n):
            if j == i or (exclude_positive and j == p):
                continue
            den += math.exp(float(views[i] @ views[j]) / temperature)
        total += -math.log(num / den)
    return total / (2 * n)


def ce_oracle(logits, target):
    out = 0.0
    for row, t in zip(logits, target):
        lse = math.log(sum(math.exp(v) for v in row))
        out += -sum(ti * (v - lse) for v, ti in zip(row, t))
    return out / len(logits)


def test_kl_closed_form_points():
    assert float(kl_diag_gaussian(torch.zeros(3), torch.ones(3))) == 0.0
    assert float(kl_diag_gaussian(torch.ones(1), torch.ones(1))) == pytest.approx(0.5)
    val = float(kl_diag_gaussian(torch.tensor([0.3], dtype=torch.float64), torch.tensor([0.7], dtype=torch.float64)))
    assert val == pytest.approx(0.5 * (0.09 + 0.49 - 1 - 2 * math.log(0.7)), abs=1e-12)
    assert val == pytest.approx(0.14667, abs=1e-5)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_diag_gaussian(torch.zeros(2), torch.tensor([1.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-3, 5))
def test_kl_nonnegative(mu, sigma):
    assert float(kl_diag_gaussian(torch.tensor([mu], dtype=torch.float64),
                                  torch.tensor([sigma], dtype=torch.float64))) >= -1e-12


def test_info_nce_all_identical_is_ln3():
    z = torch.ones(2, 4, dtype=torch.float64)
    assert float(info_nce(z, z.clone(), temperature=1.0)) == pytest.approx(math.log(3), abs=1e-12)


def test_info_nce_separated_views_go_to_zero():
    z = torch.eye(4, dtype=torch.float64)
    val = float(info_nce(z, z.clone(), temperature=0.01, variant="exclude_positive"))
    assert val < 1e-6
    # the all-but-self denominator keeps the positive, so the floor is log(1) + tiny
    assert float(info_nce(z, z.clone(), temperature=0.01)) < 1e-6


@pytest.mark.parametrize("variant", ["all_but_self", "exclude_positive"])
def test_info_nce_matches_double_loop(variant):
    rng = np.random.default_rng(0)
    for _ in range(10):
        z, zp = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        got = float(info_nce(torch.from_numpy(z), torch.from_numpy(zp), 0.5, variant=variant))
        assert got == pytest.approx(nce_double_loop(z, zp, 0.5, variant == "exclude_positive"), abs=1e-10)


def test_info_nce_rotation_invariant():
    torch.manual_seed(0)
    z, zp = torch.randn(6, 4, dtype=torch.float64), torch.randn(6, 4, dtype=torch.float64)
    q, _ = torch.linalg.qr(torch.randn(4, 4, dtype=torch.float64))
    assert float(info_nce(z @ q, zp @ q)) == pytest.approx(float(info_nce(z, zp)), abs=1e-9)


def test_info_nce_errors():
    with pytest.raises(ValueError):
        info_nce(torch.ones(1, 3), torch.ones(1, 3))
    with pytest.raises(ValueError):
        info_nce(torch.ones(2, 3), torch.ones(2, 3), temperature=0)


def test_generator_adv_loss_hand_case():
    logits = torch.tensor([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]], dtype=torch.float64)
    y = torch.tensor([[0.9, 0.05, 0.05], [0.2, 0.3, 0.5]], dtype=torch.float64)
    z = torch.tensor([[1.0, 0.0], [0.5, 0.5]], dtype=torch.float64)
    zp = torch.tensor([[0.0, 1.0], [0.5, -0.5]], dtype=torch.float64)
    beta = 0.3
    dist = ((1 + 1) + (0 + 1)) / 2
    expected = -(ce_oracle(logits.tolist(), y.tolist()) - beta * dist)
    assert float(generator_adv_loss(logits, y, z, zp, beta)) == pytest.approx(expected, abs=1e-12)


def test_generator_adv_loss_zero_divergence_and_beta_zero():
    torch.manual_seed(1)
    logits, y = torch.randn(4, 5), F.softmax(torch.randn(4, 5), 1)
    z = torch.randn(4, 3)
    ce = soft_cross_entropy(logits, y)
    assert float(generator_adv_loss(logits, y, z, z, 2.0)) == float(-ce)
    assert float(generator_adv_loss(logits, y, z, torch.randn(4, 3), 0.0)) == float(-ce)


def test_generator_adv_loss_monotone_in_logit_shift():
    y = F.one_hot(torch.tensor([0]), 3).float()
    z = torch.zeros(1, 2)
    vals = [float(generator_adv_loss(torch.tensor([[3.0 - t, 0.0, 0.0]]), y, z, z, 1.0)) for t in np.linspace(0, 6, 13)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def _rel_fd_check(fn, x, eps=1e-6, rtol=1e-3):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    flat = x.detach().view(-1)
    for j in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[j] += eps
        xm[j] -= eps
        fd = (fn(xp.view_as(x)) - fn(xm.view_as(x))).item() / (2 * eps)
        an = x.grad.view(-1)[j].item()
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an), 1e-6) + 1e-7, (j, fd, an)


def test_loss_gradients_match_finite_differences():
    torch.manual_seed(2)
    d = torch.float64
    mu = torch.randn(8, dtype=d)
    sig = torch.rand(8, dtype=d) + 0.2
    _rel_fd_check(lambda m: kl_diag_gaussian(m, sig), mu)
    _rel_fd_check(lambda s: kl_diag_gaussian(mu, s), sig)
    z, zp = torch.randn(2, 4, dtype=d), torch.randn(2, 4, dtype=d)
    _rel_fd_check(lambda a: info_nce(a, zp, 0.5), z)
    logits = torch.randn(2, 4, dtype=d)
    y = F.softmax(torch.randn(2, 4, dtype=d), 1)
    _rel_fd_check(lambda lg: generator_adv_loss(lg, y, z, zp, 0.7), logits)
    _rel_fd_check(lambda b: generator_adv_loss(logits, y, z, b, 0.7), zp)


def test_total_loss():
    assert total_loss(2.0, 1.5, 0.0) == 2.0
    assert total_loss(2.0, 1.5, 0.1) == pytest.approx(2.15)
    assert total_loss(2.0, 1.5, 0.4) - total_loss(2.0, 1.5, 0.2) == pytest.approx(0.2 * 1.5)


class _ToyOut:
    def __init__(self, logits, y_plus, params):
        self.logits, self.y_plus, self.params = logits, y_plus, params


class _ToyModel:
    """Logits = base + noise; KL params fixed. Lets the MC estimator be checked analytically."""

    def __init__(self, base, noise_scale):
        self.base, self.noise_scale = base, noise_scale

    def __call__(self, x, mode, y):
        from cudgnet.generator import PerturbationParams

        logits = self.base + self.noise_scale * torch.randn_like(self.base)
        return _ToyOut(logits, y, PerturbationParams(torch.zeros(3), torch.ones(3)))


def test_mc_task_loss_collapses_to_ce_plus_kl():
    base = torch.tensor([[2.0, 0.0, -1.0]])
    y = torch.tensor([[1.0, 0.0, 0.0]])
    loss, parts = mc_task_loss(_ToyModel(base, 0.0), None, y, K=1)
    assert float(loss) == pytest.approx(float(soft_cross_entropy(base, y)) + 0.0, abs=1e-6)
    assert float(loss) >= float(parts["kl"])


def test_mc_task_loss_variance_shrinks_with_k():
    torch.manual_seed(3)
    model = _ToyModel(torch.tensor([[1.0, 0.0, 0.0]]), 1.0)
    y = torch.tensor([[1.0, 0.0, 0.0]])

    def spread(k):
        return torch.tensor([float(mc_task_loss(model, None, y, K=k)[0]) for _ in range(400)]).var().item()

    v1, v8 = spread(1), spread(8)
    ratio = v1 / v8
    assert 4.0 < ratio < 16.0


def test_mc_task_loss_rejects_k_zero():
    with pytest.raises(ValueError):
        mc_task_loss(_ToyModel(torch.zeros(1, 3), 0.0), None, torch.ones(1, 3) / 3, K=0)
