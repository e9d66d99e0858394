"""Forecast metrics, the per-method report and the sample-efficiency sweep.

Forecasts are flat channel-major vectors, one row per window, in normalised
units. Denormalised metrics are computed from the inverted arrays, so they
relate to the normalised ones by exactly the per-channel std factors.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Normalizer, SyntheticOracle, WindowSet, flatten, unflatten
from .errors import DataError, ShapeError
from .sampler import forecast_batch
from .scorenet import ScoreNet


def _pair(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    q = np.asarray(truth, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {q.shape}")
    if p.size == 0:
        raise ShapeError("empty arrays")
    return p, q


def mse(pred, truth) -> float:
    p, q = _pair(pred, truth)
    return float(np.mean((p - q) ** 2))


def mae(pred, truth) -> float:
    p, q = _pair(pred, truth)
    return float(np.mean(np.abs(p - q)))


def regime_accuracy(forecasts, oracle: SyntheticOracle | None, regimes=None) -> float:
    """Share of forecasts whose nearest oracle mode (L2) belongs to the true regime.

    ``oracle`` must already be subset to the forecast windows and be in the same
    units as the forecasts. Ties go to the lower regime: modes are stored in
    regime order and argmin returns the first minimum.
    """
    if oracle is None:
        raise DataError("regime accuracy needs the synthetic oracle")
    f = np.asarray(forecasts, dtype=np.float64)
    modes = flatten(oracle.modes)  # (n, M, D)
    if modes.shape[0] != f.shape[0] or modes.shape[2] != f.shape[1]:
        raise ShapeError(f"forecasts {f.shape} do not match oracle modes {modes.shape}")
    truth = oracle.regime if regimes is None else np.asarray(regimes)
    dist = np.sum((f[:, None, :] - modes) ** 2, axis=-1)
    return float(np.mean(oracle.mode_regime[np.argmin(dist, axis=1)] == truth))


def mean_consistency_score(score_model: ScoreNet, forecasts, covariates) -> float:
    """Mean score-net output on final forecasts (t = 1 for timestep-aware nets)."""
    t = 1 if score_model.use_timestep else None
    return float(np.mean(score_model.score_batch(forecasts, covariates, t)))


@dataclass
class MetricsReport:
    method: str
    n: int
    mse: float
    mae: float
    mse_denorm: float
    mae_denorm: float
    num_windows: int
    window_errors: np.ndarray  # (windows, D) signed normalised errors
    regime_accuracy: float | None = None
    mean_consistency_score: float | None = None

    CSV_COLUMNS = ("method", "n", "num_windows", "mse", "mae", "mse_denorm", "mae_denorm",
                   "regime_accuracy", "mean_score")

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [self.method, self.n, self.num_windows, fmt(self.mse), fmt(self.mae), fmt(self.mse_denorm),
                fmt(self.mae_denorm), fmt(self.regime_accuracy), fmt(self.mean_consistency_score)]


def evaluate(method: str, n: int, forecasts, windows: WindowSet, norm: Normalizer,
             oracle: SyntheticOracle | None = None, score_model: ScoreNet | None = None) -> MetricsReport:
    """Metrics for forecasts over normalised ``windows``. ``oracle`` is raw (unnormalised)."""
    f = np.asarray(forecasts, dtype=np.float64)
    truth = windows.flat_targets()
    _pair(f, truth)
    h, c = windows.horizon, windows.target_channels
    f_raw = flatten(norm.invert_target(unflatten(f, h, c)))
    t_raw = flatten(norm.invert_target(windows.target))
    racc = None
    if oracle is not None:
        racc = regime_accuracy(f, oracle.subset(windows.index).normalized(norm))
    mscore = None
    if score_model is not None:
        mscore = mean_consistency_score(score_model, f, flatten(windows.covariates))
    return MetricsReport(method, int(n), mse(f, truth), mae(f, truth), mse(f_raw, t_raw), mae(f_raw, t_raw),
                         len(f), f - truth, racc, mscore)


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsReport.CSV_COLUMNS)
        for r in reports:
            w.writerow(r.row())


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- sweep


SWEEP_COLUMNS = ("method", "n", "seed", "mse", "mae", "wall_s")


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)  # dicts keyed by SWEEP_COLUMNS

    def cell(self, method: str, n: int) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and r["n"] == n]

    def mean(self, method: str, n: int, metric: str = "mse") -> float:
        cells = self.cell(method, n)
        if not cells:
            raise KeyError(f"no sweep cell for ({method}, {n})")
        return float(np.mean([r[metric] for r in cells]))

    def spread(self, method: str, metric: str = "mse") -> float:
        """Range of the seed-averaged metric across the grid for one method."""
        ns = sorted({r["n"] for r in self.rows if r["method"] == method})
        vals = [self.mean(method, n, metric) for n in ns]
        return max(vals) - min(vals)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_COLUMNS)
            for r in self.rows:
                w.writerow([r["method"], r["n"], r["seed"], repr(r["mse"]), repr(r["mae"]), f"{r['wall_s']:.3f}"])


def sample_efficiency_sweep(model, score_model, schedule, windows: WindowSet, conds, grid=(10, 20, 50, 100),
                            seeds=range(5), methods=("baseline", "semguide"), log=None) -> SweepResult:
    """Forecast the normalised ``windows`` for every (method, N, seed) cell.

    Each cell draws from ``default_rng(seed)``, so at N = 1 both methods
    consume the same stream and return the single ancestral trajectory.
    """
    if model is None or ("semguide" in methods and score_model is None):
        raise ValueError("sweep needs a trained denoiser and score network")
    truth = windows.flat_targets()
    result = SweepResult()
    for method in methods:
        for n in grid:
            for seed in seeds:
                start = time.perf_counter()
                f = forecast_batch(method, model, schedule, conds, int(n), np.random.default_rng(seed),
                                   score_model=score_model)
                wall = time.perf_counter() - start
                result.rows.append({"method": method, "n": int(n), "seed": int(seed), "mse": mse(f, truth),
                                    "mae": mae(f, truth), "wall_s": wall})
                if log is not None:
                    log(f"{method} n={n} seed={seed} mse={result.rows[-1]['mse']:.4f} ({wall:.1f}s)")
    return result
