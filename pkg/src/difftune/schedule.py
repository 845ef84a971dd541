"""Variance schedule and the forward/reverse diffusion transitions.

Timesteps are 1-indexed (t = 1..T); index 0 of every table holds the t=0
convention values (no noise yet), so cumulative quantities read naturally:
alpha_bar[0] == 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TimestepError
from .tensor import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha/alpha_bar/sigma tables for T timesteps."""

    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma: np.ndarray = field(repr=False)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise TimestepError(f"timestep {t} outside 1..{self.T}")
        return t


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule over t = 1..T with derived tables.

    sigma[t] is the posterior noise std sqrt((1 - alpha_bar[t-1]) /
    (1 - alpha_bar[t]) * beta[t]); with alpha_bar[0] := 1 this makes
    sigma[1] exactly 0.
    """
    if T < 1:
        raise TimestepError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(
            f"beta range must satisfy 0 < beta_min <= beta_max < 1, "
            f"got [{beta_min}, {beta_max}]"
        )
    beta = np.zeros(T + 1)
    if T == 1:
        beta[1] = beta_min
    else:
        beta[1:] = beta_min + (beta_max - beta_min) * np.arange(T) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])
    sigma = np.zeros(T + 1)
    sigma[1:] = np.sqrt(
        (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    )
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _same_shape(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} differ")


def forward_diffuse(x0: Tensor, t: int, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Closed-form jump to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = sched.check_t(t)
    _same_shape(x0, eps, "forward_diffuse")
    abar = sched.alpha_bar[t]
    return x0 * float(np.sqrt(abar)) + eps * float(np.sqrt(1.0 - abar))


def step_forward(x_prev: Tensor, t: int, eps_t: Tensor, sched: NoiseSchedule) -> Tensor:
    """One Markov noising step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps."""
    t = sched.check_t(t)
    _same_shape(x_prev, eps_t, "step_forward")
    b = sched.beta[t]
    return x_prev * float(np.sqrt(1.0 - b)) + eps_t * float(np.sqrt(b))


def reverse_step(
    x_t: Tensor, t: int, eps_hat: Tensor, noise: Tensor, sched: NoiseSchedule
) -> Tensor:
    """One ancestral denoising transition from x_t to x_{t-1}."""
    t = sched.check_t(t)
    _same_shape(x_t, eps_hat, "reverse_step")
    _same_shape(x_t, noise, "reverse_step")
    a = sched.alpha[t]
    abar = sched.alpha_bar[t]
    coef = (1.0 - a) / np.sqrt(1.0 - abar)
    mean = (x_t - eps_hat * float(coef)) * float(1.0 / np.sqrt(a))
    return mean + noise * float(sched.sigma[t])


def posterior_sigma(t: int, sched: NoiseSchedule) -> float:
    """Posterior noise std for step t (0 at t=1 by convention)."""
    t = sched.check_t(t)
    return float(sched.sigma[t])
