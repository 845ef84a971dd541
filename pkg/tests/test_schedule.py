"""Noise schedule tables and the three diffusion transitions."""

import numpy as np
import pytest

from difftune.errors import ShapeError, TimestepError
from difftune.rng import RngStream
from difftune.schedule import (
    NoiseSchedule,
    forward_diffuse,
    make_schedule,
    posterior_sigma,
    reverse_step,
    step_forward,
)
from difftune.tensor import Tensor


def test_linear_schedule_first_step():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert sched.beta[1] == 1e-4
    assert sched.alpha_bar[1] == 1.0 - 1e-4  # single-term product


def test_alpha_bar_matches_running_product():
    sched = make_schedule(1000, 1e-4, 0.02)
    running = 1.0
    worst = 0.0
    for t in range(1, 1001):
        running *= sched.alpha[t]
        worst = max(worst, abs(sched.alpha_bar[t] - running))
    assert worst < 1e-12


def test_alpha_bar_strictly_decreasing_and_terminal_noise():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(sched.alpha_bar[1:]) < 0)
    assert sched.alpha_bar[1000] < 1e-4  # near-pure noise at T


def test_coefficients_partition_unity():
    sched = make_schedule(100, 1e-3, 0.05)
    for t in (1, 17, 100):
        assert np.sqrt(sched.alpha_bar[t]) ** 2 + (1 - sched.alpha_bar[t]) == pytest.approx(
            1.0, abs=1e-15
        )


def test_schedule_rejects_bad_beta():
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.0)  # beta == 0 outside the open interval
    with pytest.raises(ValueError):
        make_schedule(10, 0.5, 1.0)
    with pytest.raises(TimestepError):
        make_schedule(0, 1e-4, 0.02)


def test_forward_diffuse_signal_only():
    # alpha_bar_1 = 0.81 -> sqrt gives 0.9
    sched = make_schedule(1, 0.19, 0.19)
    out = forward_diffuse(Tensor([1.0]), 1, Tensor([0.0]), sched)
    assert out.data[0] == pytest.approx(0.9, abs=1e-15)


def test_forward_diffuse_noise_only():
    sched = make_schedule(10, 0.01, 0.1)
    eps = Tensor(RngStream(1).normal(16))
    out = forward_diffuse(Tensor(np.zeros(16)), 7, eps, sched)
    expected = np.sqrt(1.0 - sched.alpha_bar[7]) * eps.data
    assert np.array_equal(out.data, expected)


def test_forward_diffuse_contract_checks():
    sched = make_schedule(10, 0.01, 0.1)
    with pytest.raises(TimestepError):
        forward_diffuse(Tensor([0.0]), 11, Tensor([0.0]), sched)
    with pytest.raises(ShapeError):
        forward_diffuse(Tensor([0.0]), 1, Tensor([0.0, 1.0]), sched)


def test_step_forward_tiny_beta_is_identity():
    sched = make_schedule(1, 1e-12, 1e-12)
    x = Tensor(RngStream(2).normal(8))
    out = step_forward(x, 1, Tensor(np.zeros(8)), sched)
    assert np.allclose(out.data, x.data, atol=1e-8)


def test_step_forward_pure_noise_coefficient():
    sched = make_schedule(1, 0.04, 0.04)
    out = step_forward(Tensor([0.0]), 1, Tensor([1.0]), sched)
    assert out.data[0] == pytest.approx(0.2, abs=1e-15)  # sqrt(0.04)


@pytest.mark.parametrize("t", [10, 100])
def test_iterated_chain_matches_closed_form_moments(t):
    # Monte-Carlo oracle: iterate the one-step chain and compare moments
    sched = make_schedule(1000, 1e-4, 0.02)
    trials = 100_000
    rng = RngStream(1234).split("chain", t)
    x = Tensor(np.ones(trials))
    for step in range(1, t + 1):
        eps = Tensor(rng.split("eps", step).normal(trials))
        x = step_forward(x, step, eps, sched)
    mean_target = np.sqrt(sched.alpha_bar[t])
    var_target = 1.0 - sched.alpha_bar[t]
    assert abs(x.data.mean() - mean_target) / mean_target < 0.01
    assert abs(x.data.var() - var_target) / var_target < 0.01


def test_reverse_step_zeroed_noise_terms():
    sched = make_schedule(5, 0.01, 0.05)
    x = Tensor([2.0])
    out = reverse_step(x, 3, Tensor([0.0]), Tensor([0.0]), sched)
    assert out.data[0] == pytest.approx(2.0 / np.sqrt(sched.alpha[3]), abs=1e-15)


def test_reverse_step_direct_substitution():
    # alpha_t = 0.99, alpha_bar_t = 0.9: hand-substituted value 0.973256
    beta = np.array([0.0, 1.0 - 0.9 / 0.99, 0.01])
    alpha = 1.0 - beta
    alpha_bar = np.array([1.0, 0.9 / 0.99, 0.9])
    sched = NoiseSchedule(
        T=2, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.zeros(3)
    )
    out = reverse_step(Tensor([1.0]), 2, Tensor([1.0]), Tensor([0.0]), sched)
    assert out.data[0] == pytest.approx(0.973256, abs=1e-6)


def test_full_reverse_chain_with_oracle_denoiser_recovers_signal():
    sched = make_schedule(50, 1e-4, 0.05)
    x0 = Tensor(RngStream(3).normal(8))
    eps = Tensor(RngStream(4).normal(8))
    x = forward_diffuse(x0, 50, eps, sched)
    zero = Tensor(np.zeros(8))
    for t in range(50, 0, -1):
        true_eps = (x.data - np.sqrt(sched.alpha_bar[t]) * x0.data) / np.sqrt(
            1.0 - sched.alpha_bar[t]
        )
        x = reverse_step(x, t, Tensor(true_eps), zero, sched)
    assert np.max(np.abs(x.data - x0.data)) < 1e-3


def test_reverse_step_closed_form_identity():
    # one reverse step off forward_diffuse output lands on the closed form
    sched = make_schedule(1000, 1e-4, 0.02)
    rng = RngStream(5)
    worst = 0.0
    for trial in range(20):
        t = rng.split("t", trial).integers(2, 1000)
        x0 = Tensor(rng.split("x0", trial).normal(4))
        eps = Tensor(rng.split("eps", trial).normal(4))
        x_t = forward_diffuse(x0, t, eps, sched)
        got = reverse_step(x_t, t, eps, Tensor(np.zeros(4)), sched)
        abar_prev = sched.alpha_bar[t - 1]
        want = (
            np.sqrt(abar_prev) * x0.data
            + np.sqrt(sched.alpha[t]) * (1 - abar_prev) / np.sqrt(1 - sched.alpha_bar[t]) * eps.data
        )
        worst = max(worst, np.max(np.abs(got.data - want)))
    assert worst < 1e-10


def test_posterior_sigma_conventions():
    sched = make_schedule(2, 0.1, 0.1)
    assert posterior_sigma(1, sched) == 0.0
    # sigma_2^2 = (1 - 0.9)/(1 - 0.81) * 0.1
    assert posterior_sigma(2, sched) == pytest.approx(0.229416, abs=1e-6)
    with pytest.raises(TimestepError):
        posterior_sigma(3, sched)


def test_posterior_sigma_bounded_by_beta():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert np.all(sched.sigma[1:] ** 2 <= sched.beta[1:] + 1e-15)
