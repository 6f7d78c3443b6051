"""Noise schedules, closed-form forward noising, and DDPM / DDIM reverse steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import RngStream


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed by ``t - 1`` for t in 1..T.

    ``alpha_bar_at(0)`` is defined as 1 so that a DDIM jump to t=0 returns
    the clean estimate.
    """

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "posterior"

    @property
    def T(self) -> int:
        return len(self.beta)

    def _check_t(self, t, allow_zero=False):
        lo = 0 if allow_zero else 1
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T) or not np.all(t == np.round(t)):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t.astype(np.int64)

    def alpha_bar_at(self, t):
        t = self._check_t(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def _derive(beta: np.ndarray, sigma_mode: str) -> NoiseSchedule:
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_mode == "posterior":
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt((1.0 - prev) / (1.0 - alpha_bar) * beta)
    elif sigma_mode == "beta":
        sigma = np.sqrt(beta)
    else:
        raise ValueError(f"sigma_mode must be 'posterior' or 'beta', got {sigma_mode!r}")
    return NoiseSchedule(beta, alpha, alpha_bar, sigma, sigma_mode)


def linear_schedule(T: int, beta_start: float, beta_end: float, sigma_mode: str = "posterior") -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError("T must be a positive integer")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    if T == 1:
        beta = np.array([float(beta_start)])
    else:
        t = np.arange(T, dtype=np.float64)
        beta = beta_start + t / (T - 1) * (beta_end - beta_start)
    return _derive(beta, sigma_mode)


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def _per_sample(values, ndim):
    """Broadcast a scalar or per-batch vector of coefficients against [N, ...] grids."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (ndim - 1))


def q_sample(z0, t, schedule: NoiseSchedule, eps):
    """sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps; ``t`` may be a scalar or one step per batch row."""
    _same_shape(z0, eps, "q_sample")
    t = schedule._check_t(t)
    ab = _per_sample(schedule.alpha_bar[t - 1], np.ndim(z0))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def ddpm_step(z_t, t: int, predicted_eps, schedule: NoiseSchedule, rng: RngStream | None):
    """Ancestral reverse step; no noise is added at t = 1."""
    _same_shape(z_t, predicted_eps, "ddpm_step")
    t = int(schedule._check_t(t))
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t - 1]
    mean = (z_t - (1.0 - a) / np.sqrt(1.0 - ab) * predicted_eps) / np.sqrt(a)
    if t == 1:
        return mean
    return mean + schedule.sigma[t - 1] * rng.normal(np.shape(z_t))


def ddim_step(z_t, t_current: int, t_previous: int, predicted_eps, schedule: NoiseSchedule):
    """Deterministic (eta = 0) jump from ``t_current`` to ``t_previous`` using cumulative alphas."""
    _same_shape(z_t, predicted_eps, "ddim_step")
    if not t_previous < t_current:
        raise ValueError(f"need t_previous < t_current, got {t_previous} >= {t_current}")
    schedule._check_t(t_current)
    ab_cur = schedule.alpha_bar_at(t_current)
    ab_prev = schedule.alpha_bar_at(t_previous)
    z0_hat = (z_t - np.sqrt(1.0 - ab_cur) * predicted_eps) / np.sqrt(ab_cur)
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * predicted_eps


def make_subsequence(T: int, S: int) -> np.ndarray:
    """Uniform-stride timesteps tau_i = round(i*T/S), i = 1..S (ending at T)."""
    if not (1 <= S <= T):
        raise ValueError(f"need 1 <= S <= T, got S={S}, T={T}")
    i = np.arange(1, S + 1, dtype=np.int64)
    return (2 * i * T + S) // (2 * S)
