"""Noise schedules, forward perturbation kernels, score-denoiser conversion,
and the deterministic Heun reverse sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteState
from .fem import Field
from .randfield import CovarianceFactor, draw


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "ve"  # "ve" or "vp"
    sigma_min: float = 1e-3
    sigma_max: float = 40.0
    n_steps: int = 400
    rho: float = 7.0
    t_min: float = 1e-4
    t_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ve", "vp"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")


def ve_sigma_steps(schedule: NoiseSchedule) -> np.ndarray:
    """Strictly decreasing noise ladder from sigma_max to sigma_min with
    rho-warped spacing."""
    n, rho = schedule.n_steps, schedule.rho
    ramp = np.linspace(0.0, 1.0, n)
    hi = schedule.sigma_max ** (1.0 / rho)
    lo = schedule.sigma_min ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    sigmas[0] = schedule.sigma_max
    sigmas[-1] = schedule.sigma_min
    return sigmas


def ve_perturb(
    a0: Field, sigma: float, factor: CovarianceFactor, rng: np.random.Generator
) -> Field:
    """Draw from the variance-exploding transition N(a0, sigma^2 C)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return a0
    return Field(a0.values + sigma * draw(factor, a0.channels, rng), a0.graph_ref)


def vp_perturb(
    a0: Field, t: float, factor: CovarianceFactor, rng: np.random.Generator
) -> Field:
    """Draw from the variance-preserving transition
    N(exp(-t/2) a0, (1 - exp(-t)) C)."""
    if t < 0:
        raise ValueError("t must be non-negative")
    mean = np.exp(-0.5 * t) * a0.values
    scale = np.sqrt(-np.expm1(-t))
    return Field(mean + scale * draw(factor, a0.channels, rng), a0.graph_ref)


def score_from_denoiser(a: Field, sigma: float, a0_hat: Field) -> Field:
    """Covariance-absorbed score -(a - a0_hat) / sigma^2."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return Field(-(a.values - a0_hat.values) / sigma**2, a.graph_ref)


def heun_sample(
    denoiser,
    schedule: NoiseSchedule,
    factor: CovarianceFactor,
    rng: np.random.Generator,
    guidance=None,
    churn: float = 0.0,
    n_channels: int | None = None,
) -> Field:
    """Run the reverse probability flow from sigma_max * N(0, C) down the
    noise ladder with second-order Heun correction.

    The slope at (a, sigma) is (a - denoise(a, sigma)) / sigma; when a
    guidance callable is supplied, guidance(a, sigma, a0_hat) is added to
    the slope at both evaluations of a step. The final transition into
    sigma_min is a plain Euler step and the state there is returned.
    Setting churn > 0 re-noises the state before each step (stochastic
    variant); the default is the deterministic sampler.
    """
    sigmas = ve_sigma_steps(schedule)
    n = len(sigmas)
    channels = n_channels if n_channels is not None else getattr(denoiser, "channels", 1)
    x = sigmas[0] * draw(factor, channels, rng)
    ref = factor.graph_ref

    def slope(state, sigma):
        a0_hat = denoiser.denoise(Field(state, ref), sigma).values
        d = (state - a0_hat) / sigma
        if guidance is not None:
            d = d + guidance(state, sigma, a0_hat)
        return d

    for i in range(n - 1):
        s_cur, s_next = sigmas[i], sigmas[i + 1]
        if churn > 0.0:
            gamma = min(churn / (n - 1), np.sqrt(2.0) - 1.0)
            s_hat = s_cur * (1.0 + gamma)
            x = x + np.sqrt(s_hat**2 - s_cur**2) * draw(factor, channels, rng)
            s_cur = s_hat
        d = slope(x, s_cur)
        x_pred = x + (s_next - s_cur) * d
        if i < n - 2:
            d_next = slope(x_pred, s_next)
            x = x + (s_next - s_cur) * 0.5 * (d + d_next)
        else:
            x = x_pred
        if not np.isfinite(x).all():
            raise NonFiniteState(f"non-finite state after step {i}", step=i)
    return Field(x, ref)
