import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import gradcheck
from promptstyle.diffusion import (NoiseSchedule, ToyDenoiser, build_noise_schedule, denoise_sample,
                                   forward_diffuse, ldm_denoising_loss, parameter_hash)


def test_single_step_schedule():
    s = build_noise_schedule(1, 0.1, 0.1)
    assert s.beta.tolist() == [0.1]
    assert s.alpha_bar[0] == pytest.approx(0.9, abs=1e-15)


def test_alpha_bar_matches_running_product():
    s = build_noise_schedule(1000, 1e-4, 0.02)
    prod, expected = 1.0, []
    for t in range(1000):
        beta_t = 1e-4 + (0.02 - 1e-4) * t / 999
        prod *= 1.0 - beta_t
        expected.append(prod)
    expected = np.array(expected)
    assert np.all(np.diff(s.alpha_bar) < 0)
    np.testing.assert_allclose(s.alpha_bar, expected, rtol=1e-12, atol=0)
    np.testing.assert_allclose(s.alpha, 1.0 - s.beta, rtol=0, atol=0)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        build_noise_schedule(*args)


@given(T=st.integers(1, 300), lo=st.floats(1e-5, 0.5), span=st.floats(0.0, 0.49))
@settings(max_examples=50, deadline=None)
def test_schedule_invariants(T, lo, span):
    s = build_noise_schedule(T, lo, lo + span)
    assert np.all((s.beta > 0) & (s.beta < 1))
    if T > 1:
        assert np.all(np.diff(s.alpha_bar) < 0)


def _degenerate_schedule(alpha_bar):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    alpha = ab / np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(T=len(ab), beta=1 - alpha, alpha=alpha, alpha_bar=ab)


def test_forward_diffuse_noise_free_and_identity():
    s = build_noise_schedule(10, 1e-3, 0.2)
    z0 = torch.randn(3, 4, 4, dtype=torch.float64)
    out = forward_diffuse(z0, 5, torch.zeros_like(z0), s)
    assert torch.equal(out, math.sqrt(s.alpha_bar[5]) * z0)
    ident = _degenerate_schedule([1.0, 0.5])
    assert torch.equal(forward_diffuse(z0, 0, torch.randn_like(z0), ident), z0)


def test_forward_diffuse_scalar_arithmetic():
    s = _degenerate_schedule([0.25])
    z0 = torch.ones(2, 3, 3, dtype=torch.float64)
    out = forward_diffuse(z0, 0, torch.ones_like(z0), s)
    assert torch.allclose(out, torch.full_like(z0, 0.5 + math.sqrt(0.75)), atol=1e-15)
    assert out[0, 0, 0].item() == pytest.approx(1.366025, abs=1e-6)


def test_forward_diffuse_errors_and_purity():
    s = build_noise_schedule(10, 1e-3, 0.2)
    z0 = torch.randn(3, 4, 4)
    eps = torch.randn(3, 4, 4)
    z0c, epsc = z0.clone(), eps.clone()
    forward_diffuse(z0, 3, eps, s)
    assert torch.equal(z0, z0c) and torch.equal(eps, epsc)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 3, torch.randn(3, 4, 5), s)
    for bad in (-1, 10):
        with pytest.raises(ValueError):
            forward_diffuse(z0, bad, eps, s)


def test_forward_marginal_statistics():
    s = build_noise_schedule(50, 1e-3, 0.1)
    t = 30
    z0 = torch.linspace(-1, 1, 8, dtype=torch.float64).view(2, 2, 2)
    g = torch.Generator().manual_seed(0)
    n = 20000
    eps = torch.randn((n, 2, 2, 2), generator=g, dtype=torch.float64)
    zt = forward_diffuse(z0.expand(n, -1, -1, -1), np.full(n, t), eps, s)
    ab = s.alpha_bar[t]
    se = math.sqrt((1 - ab) / n)
    assert torch.all((zt.mean(0) - math.sqrt(ab) * z0).abs() < 4 * se)
    assert torch.all((zt.var(0) / (1 - ab) - 1).abs() < 0.05)


class EpsOracle(torch.nn.Module):
    """Returns a stored noise grid exactly."""

    conditioning_dim = 4
    injection_points = ()

    def __init__(self, eps):
        super().__init__()
        self.eps = eps

    def forward(self, z_t, t, cond, residuals=None):
        return self.eps


class Zero(EpsOracle):
    def __init__(self):
        super().__init__(None)

    def forward(self, z_t, t, cond, residuals=None):
        return torch.zeros_like(z_t)


def test_ldm_loss_trivial_cases():
    s = build_noise_schedule(10, 1e-3, 0.2)
    z0 = torch.randn(3, 4, 4, dtype=torch.float64)
    eps = torch.randn_like(z0)
    cond = torch.zeros(2, 4, dtype=torch.float64)
    assert ldm_denoising_loss(EpsOracle(eps), z0, cond, 4, eps, s).item() == 0.0
    assert ldm_denoising_loss(Zero(), z0, cond, 4, torch.ones_like(z0), s).item() == 1.0
    with pytest.raises(ValueError):
        ldm_denoising_loss(Zero(), z0, torch.zeros(2, 5, dtype=torch.float64), 4, eps, s)
    with pytest.raises(ValueError):
        ldm_denoising_loss(Zero(), z0, cond, 4, torch.ones(3, 4, 5, dtype=torch.float64), s)


def test_ldm_loss_matches_numpy_mse(micro_model, micro_sched):
    g = torch.Generator().manual_seed(1)
    z0 = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    eps = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    cond = torch.randn((2, 2, 4), generator=g, dtype=torch.float64)
    t = np.array([2, 6])
    loss = ldm_denoising_loss(micro_model, z0, cond, t, eps, micro_sched).item()

    ab = micro_sched.alpha_bar[t][:, None, None, None]
    zt = np.sqrt(ab) * z0.numpy() + np.sqrt(1 - ab) * eps.numpy()
    pred = micro_model(torch.from_numpy(zt), torch.from_numpy(t), cond).detach().numpy()
    oracle = sum(float((e - p) ** 2) for e, p in zip(eps.numpy().ravel(), pred.ravel())) / eps.numel()
    assert loss == pytest.approx(oracle, abs=1e-10)


def test_ldm_loss_gradient_matches_finite_differences(micro_model, micro_sched):
    model = micro_model
    params = list(model.parameters())
    assert sum(p.numel() for p in params) <= 500
    g = torch.Generator().manual_seed(2)
    z0 = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    eps = torch.randn((2, 3, 8, 8), generator=g, dtype=torch.float64)
    cond = torch.randn((2, 2, 4), generator=g, dtype=torch.float64)
    t = np.array([1, 5])
    for p in params:
        p.requires_grad_(True)
    loss = ldm_denoising_loss(model, z0, cond, t, eps, micro_sched)
    grads = torch.autograd.grad(loss, params)

    def f():
        return ldm_denoising_loss(model, z0, cond, t, eps, micro_sched).item()

    with torch.no_grad():
        for p, gp in zip(params, grads):
            ok, worst, _ = gradcheck.check(gp, gradcheck.numeric_grad(f, p))
            assert ok, worst


def test_denoise_start_zero_is_noop(micro_model, micro_sched):
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    out = denoise_sample(micro_model, x, 0, torch.zeros(2, 4, dtype=torch.float64), micro_sched)
    assert torch.equal(out, x)
    with pytest.raises(ValueError):
        denoise_sample(micro_model, x, micro_sched.T, torch.zeros(2, 4, dtype=torch.float64), micro_sched)


def test_denoise_deterministic_and_seed_independent(micro_model, micro_sched):
    x = torch.randn(3, 8, 8, dtype=torch.float64)
    cond = torch.randn(2, 4, dtype=torch.float64)
    a = denoise_sample(micro_model, x, 7, cond, micro_sched, rng_seed=3)
    b = denoise_sample(micro_model, x, 7, cond, micro_sched, rng_seed=3)
    c = denoise_sample(micro_model, x, 7, cond, micro_sched, rng_seed=4)
    assert torch.equal(a, b) and torch.equal(a, c)


def test_denoise_zero_prediction_closed_form():
    s = build_noise_schedule(4, 0.1, 0.4)
    x = torch.tensor([[[1.0, -2.0], [0.5, 3.0]], [[-1.5, 0.25], [2.0, -0.75]]], dtype=torch.float64)
    out = denoise_sample(Zero(), x, 3, torch.zeros(1, 4, dtype=torch.float64), s)
    # zero noise prediction: each eta=0 step rescales by sqrt(ab[t-1] / ab[t])
    abar = [0.9, 0.9 * 0.8, 0.9 * 0.8 * 0.7, 0.9 * 0.8 * 0.7 * 0.6]
    factor = 1.0
    for t in (3, 2, 1):
        factor *= math.sqrt(abar[t - 1] / abar[t])
    assert torch.allclose(out, x * factor, atol=1e-12, rtol=0)
    assert factor == pytest.approx(math.sqrt(0.9 / abar[3]), rel=1e-12)


def test_toy_denoiser_shapes_and_injection_points():
    m = ToyDenoiser(widths=(4, 6, 8), conditioning_dim=5, time_dim=8)
    x = torch.randn(2, 3, 16, 16)
    out = m(x, torch.tensor([1, 2]), torch.randn(2, 3, 5))
    assert out.shape == x.shape
    assert m(x[0], 3, torch.randn(3, 5)).shape == x[0].shape
    assert [p.name for p in m.injection_points] == ["mid", "up1", "up2"]
    assert [p.channels for p in m.injection_points] == [8, 6, 4]
    with pytest.raises(ValueError):
        m(x, 1, torch.randn(2, 3, 4))


def test_parameter_hash_tracks_changes():
    m = ToyDenoiser(widths=(2, 2, 2), conditioning_dim=4, time_dim=4)
    h = parameter_hash(m)
    assert parameter_hash(m) == h
    with torch.no_grad():
        next(m.parameters()).view(-1)[0] += 1e-3
    assert parameter_hash(m) != h
