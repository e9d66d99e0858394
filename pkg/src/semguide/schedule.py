"""Discrete DDPM variance schedule and the closed-form diffusion arithmetic.

Steps are 1-indexed (t = 1..T) everywhere in the public API; the arrays on
:class:`NoiseSchedule` are stored 0-indexed, so ``beta[t - 1]`` is beta_t.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError, ShapeError

# alpha_bar at the last step should leave x_T close to pure noise
ALPHA_BAR_T_LIMIT = 0.05


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_steps: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def alpha_bar_at(self, t):
        """alpha_bar for step(s) ``t`` with alpha_bar_0 = 1."""
        t = np.asarray(t)
        padded = np.concatenate(([1.0], self.alpha_bar))
        return padded[t]

    def to_dict(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return make_linear_schedule(d["num_steps"], d["beta_start"], d["beta_end"])

    def same_as(self, other: "NoiseSchedule") -> bool:
        return self.to_dict() == other.to_dict()


def make_linear_schedule(num_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if int(num_steps) != num_steps or num_steps < 1:
        raise ScheduleError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    num_steps = int(num_steps)
    beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    sigma[0] = 0.0  # the last reverse step (t = 1) is deterministic

    if num_steps > 1 and not np.all(np.diff(alpha_bar) < 0):
        raise ScheduleError("alpha_bar is not strictly decreasing")
    if alpha_bar[-1] >= ALPHA_BAR_T_LIMIT:
        warnings.warn(
            f"alpha_bar_T = {alpha_bar[-1]:.4g} >= {ALPHA_BAR_T_LIMIT}; x_T will not be close "
            "to pure noise (increase num_steps or beta_end)",
            RuntimeWarning,
            stacklevel=2,
        )
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(num_steps, float(beta_start), float(beta_end), beta, alpha, alpha_bar, sigma)


def _check_step(schedule: NoiseSchedule, t) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise ScheduleError(f"step index must be integer, got dtype {t.dtype}")
    if np.any(t < 1) or np.any(t > schedule.num_steps):
        raise ScheduleError(f"step index out of range [1, {schedule.num_steps}]: {t}")
    return t


def _coef(values: np.ndarray, t: np.ndarray, ndim: int) -> np.ndarray:
    # per-row coefficients broadcast against (rows, ...) arrays
    c = values[t - 1]
    if c.ndim:
        c = c.reshape(c.shape + (1,) * (ndim - c.ndim))
    return c


def forward_noise(schedule: NoiseSchedule, x0, t, z) -> np.ndarray:
    """Sample x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * z.

    ``t`` may be a scalar or one step per leading row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise ShapeError(f"x0 shape {x0.shape} != z shape {z.shape}")
    t = _check_step(schedule, t)
    ab = _coef(schedule.alpha_bar, t, x0.ndim)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def denoise_estimate(schedule: NoiseSchedule, x_t, eps, t) -> np.ndarray:
    """One reverse step without noise: (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x_t.shape != eps.shape:
        raise ShapeError(f"x_t shape {x_t.shape} != eps shape {eps.shape}")
    t = _check_step(schedule, t)
    ab = _coef(schedule.alpha_bar, t, x_t.ndim)
    if np.any(1.0 - ab <= 0.0):
        raise ScheduleError("denoise_estimate is singular where alpha_bar_t == 1")
    a = _coef(schedule.alpha, t, x_t.ndim)
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps) / np.sqrt(a)
