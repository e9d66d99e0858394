"""Reverse-diffusion samplers: plain ancestral DDPM, the median-of-N baseline
and the score-reweighted particle sampler.

All samplers share one vectorised loop over arrays shaped
(windows, particles, state_dim). Random draws happen in a fixed order (initial
state, then one standard-normal block per noisy step), so a particle sampler
with N = 1 consumes exactly the same stream as a single ancestral trajectory.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .denoiser import Denoiser, predict_noise
from .errors import ShapeError
from .schedule import NoiseSchedule, denoise_estimate
from .scorenet import ScoreNet

METHODS = ("ddpm", "baseline", "semguide")


def importance_weights(scores) -> np.ndarray:
    """Normalise scores along the last axis so each row sums to one."""
    s = np.asarray(scores, dtype=np.float64)
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite and non-negative")
    total = s.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("all scores are zero; weights are undefined")
    return s / total


def weighted_center(denoised, weights) -> np.ndarray:
    """Convex combination sum_i w_i x_i over the particle axis (second to last)."""
    x = np.asarray(denoised, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.shape[:-1] != w.shape:
        raise ShapeError(f"{w.shape[-1] if w.ndim else 0} weights for {x.shape[-2]} particles")
    return np.sum(w[..., None] * x, axis=-2)


def effective_sample_size(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return 1.0 / np.sum(w * w, axis=-1)


@dataclass
class StepRecord:
    t: int
    scores: np.ndarray  # (W, N)
    weights: np.ndarray  # (W, N)
    ess: np.ndarray  # (W,)
    center: np.ndarray  # (W, D)
    particle_mean: np.ndarray  # (W, D) plain mean of the denoised candidates

    @property
    def center_norm(self) -> np.ndarray:
        return np.linalg.norm(self.center, axis=-1)


@dataclass
class SamplerTrace:
    seed: int | None = None
    num_particles: int = 0
    wall_time: float = 0.0
    steps: list = field(default_factory=list)

    def write_csv(self, path, window: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "particle", "score", "weight", "ess"])
            for rec in self.steps:
                for i in range(rec.weights.shape[1]):
                    w.writerow([rec.t, i, repr(float(rec.scores[window, i])),
                                repr(float(rec.weights[window, i])), repr(float(rec.ess[window]))])


ScoreFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def _score_fn(score_model) -> ScoreFn:
    """Adapt a ScoreNet (or any ``f(states, covariates, t)``) to the loop's call form.

    States scored at step t are estimates of x_{t-1}; a timestep-aware network
    is given max(t - 1, 1), the nearest noise level it saw during training.
    """
    if isinstance(score_model, ScoreNet):
        if score_model.use_timestep:
            return lambda s, c, t: score_model.score_batch(s, c, max(t - 1, 1))
        return lambda s, c, t: score_model.score_batch(s, c)
    if callable(score_model):
        return score_model
    raise TypeError(f"cannot score with {type(score_model).__name__}")


def _check_compat(model: Denoiser, schedule: NoiseSchedule, conds: np.ndarray) -> None:
    if model.schedule["num_steps"] != schedule.num_steps:
        raise ShapeError(f"model was trained with {model.schedule['num_steps']} steps, schedule has {schedule.num_steps}")
    if conds.ndim != 2 or conds.shape[1] != model.cond_dim:
        raise ShapeError(f"conditioning width {conds.shape[-1]} != model's {model.cond_dim}")


def _reverse(model: Denoiser, schedule: NoiseSchedule, conds, n: int, rng: np.random.Generator,
             score_model=None, trace: SamplerTrace | None = None, resample: bool = False) -> np.ndarray:
    """Shared reverse loop. Unguided: returns all particles (W, n, D).
    Guided: returns the final weighted centers (W, D)."""
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    _check_compat(model, schedule, conds)
    if n < 1:
        raise ValueError("need at least one particle/sample")
    W, D = conds.shape[0], model.state_dim
    guided = score_model is not None
    if guided:
        score = _score_fn(score_model)
        # y is the leading block of the conditioning vector
        cov = conds[:, : model.horizon * model.covariate_channels]
        cov_rows = np.repeat(cov, n, axis=0)
    cond_rows = np.repeat(conds, n, axis=0)
    x = rng.standard_normal((W, n, D))
    center = None
    for t in range(schedule.num_steps, 0, -1):
        eps = predict_noise(model, x.reshape(W * n, D), cond_rows, t).reshape(W, n, D)
        cand = denoise_estimate(schedule, x, eps, t)
        if guided:
            s = np.asarray(score(cand.reshape(W * n, D), cov_rows, t), dtype=np.float64).reshape(W, n)
            w = importance_weights(s)
            center = weighted_center(cand, w)
            if trace is not None:
                trace.steps.append(StepRecord(t, s, w, effective_sample_size(w), center, cand.mean(axis=1)))
            if resample:
                u = rng.random((W, 1))
                cum = np.cumsum(w, axis=1)
                # systematic resampling positions (u + i) / n
                pos = (u + np.arange(n)) / n
                pick = np.minimum((cum[:, None, :] <= pos[:, :, None]).sum(axis=2), n - 1)
                base = np.take_along_axis(cand, pick[..., None], axis=1)
            else:
                base = np.broadcast_to(center[:, None, :], (W, n, D))
        else:
            base = cand
        sig = schedule.sigma[t - 1]
        x = base + sig * rng.standard_normal((W, n, D)) if sig > 0 else np.array(base)
    return center if guided else x


def ddpm_sample(model: Denoiser, schedule: NoiseSchedule, cond, rng: np.random.Generator) -> np.ndarray:
    """One ancestral trajectory from x_T ~ N(0, I); returns x_0."""
    return _reverse(model, schedule, np.asarray(cond)[None, :], 1, rng)[0, 0]


def median_forecast(model: Denoiser, schedule: NoiseSchedule, cond, num_samples: int,
                    rng: np.random.Generator, sample_fn=None) -> np.ndarray:
    """Elementwise median of ``num_samples`` independent trajectories.

    Even counts use the mean of the two middle order statistics. ``sample_fn``
    replaces the sampler (called as ``sample_fn(rng)``) for testing.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if sample_fn is not None:
        draws = np.stack([np.asarray(sample_fn(rng), dtype=np.float64) for _ in range(num_samples)])
        return np.median(draws, axis=0)
    return np.median(_reverse(model, schedule, np.asarray(cond)[None, :], num_samples, rng)[0], axis=0)


def semguide_sample(model: Denoiser, score_model, schedule: NoiseSchedule, cond, num_particles: int,
                    rng: np.random.Generator, trace: bool = False, resample: bool = False,
                    seed: int | None = None):
    """Score-reweighted particle sampler; returns ``(x0_bar, SamplerTrace)``.

    Each step denoises every particle, weights the candidates by their scores,
    collapses them to the weighted center and re-noises the center with
    sigma_t. ``resample=True`` swaps the collapse for systematic resampling of
    the candidates (an ablation, not the default procedure).
    """
    if num_particles < 1:
        raise ValueError("num_particles must be >= 1")
    tr = SamplerTrace(seed=seed, num_particles=num_particles)
    start = time.perf_counter()
    out = _reverse(model, schedule, np.asarray(cond)[None, :], num_particles, rng, score_model,
                   tr if trace else None, resample)
    tr.wall_time = time.perf_counter() - start
    return out[0], tr


def forecast_batch(method: str, model: Denoiser, schedule: NoiseSchedule, conds, n: int,
                   rng: np.random.Generator, score_model=None, resample: bool = False) -> np.ndarray:
    """Forecasts for many windows at once, shape (W, state_dim).

    ``baseline`` is the median of ``n`` trajectories, ``semguide`` the particle
    sampler with ``n`` particles, ``ddpm`` a single trajectory.
    """
    if method == "ddpm":
        return _reverse(model, schedule, conds, 1, rng)[:, 0]
    if method == "baseline":
        return np.median(_reverse(model, schedule, conds, n, rng), axis=1)
    if method == "semguide":
        if score_model is None:
            raise ValueError("semguide needs a score model")
        return _reverse(model, schedule, conds, n, rng, score_model, resample=resample)
    raise ValueError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
