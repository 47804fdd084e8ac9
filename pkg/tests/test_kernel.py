import math

import numpy as np
import pytest
import torch

from ddmm.errors import ValidationError
from ddmm.kernel import DiffusionKernel
from ddmm.schedule import NoiseSchedule, make_cosine_schedule, make_linear_schedule

from conftest import randn


@pytest.fixture
def kernel():
    return DiffusionKernel(make_cosine_schedule(100))


@pytest.fixture
def k4():
    return DiffusionKernel(make_cosine_schedule(4))


def test_forward_step_zero_cases(kernel, rng):
    x = randn(rng, 1, 4, 4)
    zeros = torch.zeros_like(x)
    beta = kernel.schedule.beta(7)
    assert torch.equal(kernel.forward_step(x, 7, zeros), math.sqrt(1 - beta) * x)
    assert torch.equal(kernel.forward_step(zeros, 7, x), math.sqrt(beta) * x)


def test_forward_step_scalar_example():
    k = DiffusionKernel(NoiseSchedule.from_betas("linear", np.array([0.19, 0.19])))
    ones = torch.ones(1, 2, 2, dtype=torch.float64)
    out = k.forward_step(ones, 1, ones)
    assert torch.allclose(out, torch.full_like(ones, math.sqrt(0.81) + math.sqrt(0.19)), rtol=1e-15, atol=0)


def test_forward_step_rejects_bad_inputs(kernel, rng):
    with pytest.raises(ValidationError):
        kernel.forward_step(randn(rng, 1, 4, 4), 1, randn(rng, 1, 4, 5))
    with pytest.raises(ValidationError):
        kernel.forward_step(randn(rng, 1, 4, 4), 0, randn(rng, 1, 4, 4))
    with pytest.raises(ValidationError):
        kernel.forward_jump(randn(rng, 1, 4, 4), 101, randn(rng, 1, 4, 4))


def test_forward_jump_zero_cases(kernel, rng):
    x = randn(rng, 1, 4, 4)
    zeros = torch.zeros_like(x)
    bar = kernel.schedule.alpha_bar(30)
    assert torch.equal(kernel.forward_jump(x, 30, zeros), math.sqrt(bar) * x)
    bar_t = kernel.schedule.alpha_bar(100)
    assert torch.equal(kernel.forward_jump(zeros, 100, x), math.sqrt(1 - bar_t) * x)


def test_forward_jump_vector_timesteps(kernel, rng):
    x0 = randn(rng, 3, 1, 4, 4)
    eps = randn(rng, 3, 1, 4, 4)
    t = torch.tensor([1, 50, 100])
    batched = kernel.forward_jump(x0, t, eps)
    for i, ti in enumerate(t.tolist()):
        assert torch.allclose(batched[i], kernel.forward_jump(x0[i], ti, eps[i]), rtol=1e-15, atol=1e-15)


def test_forward_jump_matches_chained_steps_in_distribution():
    schedule = make_linear_schedule(3, 0.1, 0.3)
    k = DiffusionKernel(schedule)
    gen = np.random.default_rng(7)
    n = 100_000
    x0 = torch.full((n, 1, 1, 1), 0.5, dtype=torch.float64)
    x = x0
    for t in (1, 2, 3):
        x = k.forward_step(x, t, torch.from_numpy(gen.standard_normal((n, 1, 1, 1))))
    jumped = k.forward_jump(x0, torch.full((n,), 3), torch.from_numpy(gen.standard_normal((n, 1, 1, 1))))

    v = 0.0
    for t in (1, 2, 3):
        v = (1 - schedule.beta(t)) * v + schedule.beta(t)
    assert v == pytest.approx(1 - schedule.alpha_bar(3), rel=1e-14)
    mean = math.sqrt(schedule.alpha_bar(3)) * 0.5
    se_mean = math.sqrt(v / n)
    se_var = v * math.sqrt(2 / (n - 1))
    for sample in (x, jumped):
        assert abs(float(sample.mean()) - mean) < 4 * se_mean
        assert abs(float(sample.var()) - v) < 4 * se_var


def test_variance_preservation(kernel):
    gen = np.random.default_rng(3)
    n = 100_000
    x0 = torch.from_numpy(gen.standard_normal((n, 1, 1, 1)))
    eps = torch.from_numpy(gen.standard_normal((n, 1, 1, 1)))
    for t in (1, 25, 75, 100):
        xt = kernel.forward_jump(x0, t, eps)
        assert abs(float(xt.var()) - 1.0) < 4 * math.sqrt(2 / (n - 1))


def _brute_posterior(schedule, x0, xt, t):
    """q(x_{t-1} | x_t, x_0) by Bayes' rule on the two Gaussians, per element."""
    bar_prev = schedule.alpha_bar(t - 1)
    beta, alpha = schedule.beta(t), schedule.alpha(t)
    # prior x_{t-1} ~ N(sqrt(bar_prev) x0, 1 - bar_prev); likelihood x_t ~ N(sqrt(alpha) x_{t-1}, beta)
    prior_prec = 1.0 / (1.0 - bar_prev)
    lik_prec = alpha / beta
    var = 1.0 / (prior_prec + lik_prec)
    mean = var * (prior_prec * math.sqrt(bar_prev) * x0 + math.sqrt(alpha) / beta * xt)
    return mean, var


@pytest.mark.parametrize("t", [2, 3, 4])
def test_posterior_matches_gaussian_conditioning(k4, rng, t):
    x0 = randn(rng, 1, 2, 2)
    xt = randn(rng, 1, 2, 2)
    params = k4.posterior(x0, xt, t)
    mean, var = _brute_posterior(k4.schedule, x0.numpy(), xt.numpy(), t)
    np.testing.assert_allclose(params.mean.numpy(), mean, rtol=1e-10, atol=1e-12)
    assert params.variance == pytest.approx(var, rel=1e-10)


def test_posterior_at_t1_is_degenerate(k4, rng):
    x0, xt = randn(rng, 1, 2, 2), randn(rng, 1, 2, 2)
    params = k4.posterior(x0, xt, 1)
    assert params.variance == 0.0
    assert torch.allclose(params.mean, x0, rtol=1e-12, atol=1e-12)
    zeros = torch.zeros_like(x0)
    assert torch.equal(k4.posterior(zeros, zeros, 3).mean, zeros)
    with pytest.raises(ValidationError):
        k4.posterior(x0, xt, 0)


def test_eps_to_x0(kernel, rng):
    x0, eps = randn(rng, 1, 4, 4), randn(rng, 1, 4, 4)
    for t in (1, 40, 100):
        xt = kernel.forward_jump(x0, t, eps)
        assert torch.allclose(kernel.eps_to_x0(xt, t, eps), x0, rtol=1e-9, atol=1e-9)
    c = torch.full((1, 2, 2), 0.3, dtype=torch.float64)
    bar = kernel.schedule.alpha_bar(10)
    out = kernel.eps_to_x0(math.sqrt(bar) * c, 10, torch.zeros_like(c))
    assert torch.allclose(out, c, rtol=1e-15, atol=0)
    big = torch.full((1, 2, 2), 1.7, dtype=torch.float64)
    assert torch.equal(kernel.eps_to_x0(math.sqrt(bar) * big, 10, torch.zeros_like(big), clamp=True), torch.ones_like(big))


def test_ddpm_reverse_step(kernel, rng):
    x0, eps = randn(rng, 1, 4, 4).clamp(-1, 1), randn(rng, 1, 4, 4)
    xt = kernel.forward_jump(x0, 1, eps)
    out = kernel.ddpm_reverse_step(xt, 1, eps, None, clamp=False)
    assert torch.allclose(out, kernel.posterior(kernel.eps_to_x0(xt, 1, eps), xt, 1).mean, rtol=0, atol=0)
    xt = kernel.forward_jump(x0, 20, eps)
    out = kernel.ddpm_reverse_step(xt, 20, eps, torch.zeros_like(xt), clamp=False)
    assert torch.allclose(out, kernel.posterior(x0, xt, 20).mean, rtol=1e-9, atol=1e-9)
    with pytest.raises(ValidationError):
        kernel.ddpm_reverse_step(xt, 1, eps, torch.ones_like(xt))


def test_ddpm_chain_is_deterministic(kernel):
    def chain():
        gen = np.random.default_rng(11)
        x = torch.from_numpy(gen.standard_normal((1, 4, 4)))
        for t in range(100, 0, -1):
            eps_hat = 0.1 * x
            z = torch.from_numpy(gen.standard_normal((1, 4, 4))) if t > 1 else None
            x = kernel.ddpm_reverse_step(x, t, eps_hat, z)
        return x

    assert chain().numpy().tobytes() == chain().numpy().tobytes()


def test_ddim_eta0_with_true_eps_lands_on_forward_jump(kernel, rng):
    x0, eps = randn(rng, 1, 4, 4), randn(rng, 1, 4, 4)
    xt = kernel.forward_jump(x0, 60, eps)
    out = kernel.ddim_step(xt, 60, 30, eps, eta=0.0, clamp=False)
    assert torch.allclose(out, kernel.forward_jump(x0, 30, eps), rtol=1e-12, atol=1e-12)


def test_ddim_two_steps_equal_one(kernel, rng):
    x0, eps = randn(rng, 1, 4, 4), randn(rng, 1, 4, 4)
    xt = kernel.forward_jump(x0, 90, eps)
    via = kernel.ddim_step(kernel.ddim_step(xt, 90, 50, eps, clamp=False), 50, 10, eps, clamp=False)
    direct = kernel.ddim_step(xt, 90, 10, eps, clamp=False)
    assert torch.allclose(via, direct, rtol=1e-12, atol=1e-12)


def test_ddim_eta1_sigma_is_posterior_std(kernel):
    for t in range(2, 101):
        sigma = kernel.ddim_sigma(t, t - 1, 1.0)
        assert sigma ** 2 == pytest.approx(kernel.schedule.posterior_variance(t), rel=1e-10)


def test_ddim_step_validation(kernel, rng):
    x = randn(rng, 1, 4, 4)
    with pytest.raises(ValidationError):
        kernel.ddim_step(x, 10, 10, x)
    with pytest.raises(ValidationError):
        kernel.ddim_step(x, 10, 5, x, eta=0.5)  # needs z
    with pytest.raises(ValidationError):
        kernel.ddim_step(x, 10, 5, x, eta=1.5, z=x)


def test_ddim_ten_step_chain_is_finite(kernel):
    gen = np.random.default_rng(5)
    x = torch.from_numpy(gen.standard_normal((1, 4, 4)))
    ts = kernel.schedule.ddim_timesteps(10)
    for t, t_prev in zip(ts, ts[1:] + [0]):
        x = kernel.ddim_step(x, t, t_prev, 0.5 * x)
    assert torch.isfinite(x).all()


def test_loss_prior(kernel):
    bar = kernel.schedule.alpha_bar(100)
    zeros = torch.zeros(1, 3, 3, dtype=torch.float64)
    expected = 9 * 0.5 * (-bar - math.log(1 - bar))
    assert float(kernel.loss_prior(zeros)) == pytest.approx(expected, rel=1e-9, abs=1e-15)
    ones = torch.ones_like(zeros)
    assert float(kernel.loss_prior(ones)) > float(kernel.loss_prior(zeros))
    assert float(kernel.loss_prior(zeros)) < 1e-3


def test_loss_step(kernel, rng):
    x0, eps = randn(rng, 1, 4, 4), randn(rng, 1, 4, 4)
    for t in (2, 10, 50, 100):
        xt = kernel.forward_jump(x0, t, eps)
        assert float(kernel.loss_step(x0, xt, t, eps)) < 1e-18
        assert float(kernel.loss_step(x0, xt, t, randn(rng, 1, 4, 4))) >= 0.0
    with pytest.raises(ValidationError):
        kernel.loss_step(x0, x0, 1, eps)


def test_loss_step_constant_mean_difference(kernel, rng):
    t = 20
    x0 = torch.zeros(1, 2, 2, dtype=torch.float64)
    xt = randn(rng, 1, 2, 2)
    c = 0.1
    # shifting the x0 estimate by d shifts the posterior mean by c0 * d
    s = kernel.schedule
    c0 = math.sqrt(s.alpha_bar(t - 1)) * s.beta(t) / (1 - s.alpha_bar(t))
    d = c / c0
    eps_true = (xt - math.sqrt(s.alpha_bar(t)) * x0) / math.sqrt(1 - s.alpha_bar(t))
    eps_hat = eps_true - d * math.sqrt(s.alpha_bar(t)) / math.sqrt(1 - s.alpha_bar(t))
    expected = 4 * c * c / (2 * s.posterior_variance(t))
    assert float(kernel.loss_step(x0, xt, t, eps_hat)) == pytest.approx(expected, rel=1e-8)


def test_loss_decoder(kernel, rng):
    x1, eps_hat = randn(rng, 1, 2, 2), randn(rng, 1, 2, 2)
    beta = kernel.schedule.beta(1)
    mu = kernel.eps_to_x0(x1, 1, eps_hat)
    assert float(kernel.loss_decoder(mu, x1, eps_hat)) == pytest.approx(4 * 0.5 * math.log(2 * math.pi * beta), rel=1e-12)
    base = 4 * 0.5 * math.log(2 * math.pi * beta)
    r1 = float(kernel.loss_decoder(mu + 0.01, x1, eps_hat)) - base
    r2 = float(kernel.loss_decoder(mu + 0.02, x1, eps_hat)) - base
    assert r2 == pytest.approx(4 * r1, rel=1e-6)


def test_loss_simple():
    eps = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert float(DiffusionKernel.loss_simple(eps, eps)) == 0.0
    assert float(DiffusionKernel.loss_simple(torch.zeros(2, 2), torch.full((2, 2), 3.0))) == 9.0
    assert float(DiffusionKernel.loss_simple(eps, torch.tensor([[1.0, 2.0], [3.0, 0.0]]))) == 4.0
    with pytest.raises(ValidationError):
        DiffusionKernel.loss_simple(eps, torch.zeros(3))


def test_vlb_terms_add_up(k4, rng):
    x0 = randn(rng, 2, 1, 2, 2)
    terms = k4.vlb(x0, lambda xt, t: torch.zeros_like(xt), np.random.default_rng(0))
    assert len(terms.steps) == 3
    assert terms.total == pytest.approx(terms.decoder + sum(terms.steps) + terms.prior, rel=1e-14)
    assert all(s >= 0 for s in terms.steps)
    assert terms.prior == pytest.approx(float(k4.loss_prior(x0)))
