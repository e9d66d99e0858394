"""Datasets: synthetic regime series with a known conditional law, CSV
ingestion, sliding windows, chronological splits and z-score normalisation.

Windows keep their matrices in (time, channel) layout. Models see them through
:func:`flatten`, which is channel-major: all time steps of channel 0, then all
time steps of channel 1, and so on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import DataError

DATASET_FORMAT_VERSION = 1
HOUR = np.timedelta64(1, "h")


def flatten(mat: np.ndarray) -> np.ndarray:
    """(time, channel) -> channel-major vector; works on stacked (n, time, channel) too."""
    mat = np.asarray(mat)
    return np.swapaxes(mat, -1, -2).reshape(mat.shape[:-2] + (-1,))


def unflatten(vec: np.ndarray, length: int, channels: int) -> np.ndarray:
    vec = np.asarray(vec)
    return np.swapaxes(vec.reshape(vec.shape[:-1] + (channels, length)), -1, -2)


@dataclass
class Series:
    """One contiguous multivariate series: target (L, Ct), covariates (L, Cc)."""

    target: np.ndarray
    covariates: np.ndarray
    timestamps: np.ndarray | None = None
    series_id: int = 0

    def __len__(self):
        return len(self.target)


@dataclass
class Window:
    history: np.ndarray  # (history_len, target_channels)
    covariates: np.ndarray  # (horizon, covariate_channels)
    target: np.ndarray  # (horizon, target_channels)
    series_id: int = 0
    start: int = 0  # row index of the first target step within its series
    regime: int | None = None


@dataclass
class WindowSet:
    """A stack of windows with shared shapes.

    ``index`` records each window's position in the dataset it was cut from so
    split subsets can be mapped back to oracle arrays.
    """

    history: np.ndarray  # (n, H, Ct)
    covariates: np.ndarray  # (n, h, Cc)
    target: np.ndarray  # (n, h, Ct)
    series_id: np.ndarray
    start: np.ndarray
    regime: np.ndarray | None = None
    index: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.target)
        if self.index is None:
            self.index = np.arange(n)
        if len(self.covariates) != n or len(self.history) != n:
            raise DataError("history / covariates / target counts differ")
        if n and self.covariates.shape[1] != self.target.shape[1]:
            raise DataError("covariate horizon does not match target horizon")

    def __len__(self):
        return len(self.target)

    def __getitem__(self, i: int) -> Window:
        return Window(
            self.history[i], self.covariates[i], self.target[i], int(self.series_id[i]),
            int(self.start[i]), None if self.regime is None else int(self.regime[i]),
        )

    @property
    def horizon(self) -> int:
        return self.target.shape[1]

    @property
    def history_len(self) -> int:
        return self.history.shape[1]

    @property
    def target_channels(self) -> int:
        return self.target.shape[2]

    @property
    def covariate_channels(self) -> int:
        return self.covariates.shape[2]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return WindowSet(
            self.history[idx], self.covariates[idx], self.target[idx], self.series_id[idx],
            self.start[idx], None if self.regime is None else self.regime[idx], self.index[idx],
        )

    def flat_targets(self) -> np.ndarray:
        return flatten(self.target)


def concat_windows(sets: list[WindowSet]) -> WindowSet:
    if not sets:
        raise DataError("nothing to concatenate")
    regimes = None if any(s.regime is None for s in sets) else np.concatenate([s.regime for s in sets])
    out = WindowSet(
        np.concatenate([s.history for s in sets]),
        np.concatenate([s.covariates for s in sets]),
        np.concatenate([s.target for s in sets]),
        np.concatenate([s.series_id for s in sets]),
        np.concatenate([s.start for s in sets]),
        regimes,
    )
    return out


def make_windows(series: Series, history_len: int, horizon: int, stride: int) -> WindowSet:
    """Sliding windows: ``floor((L - history_len - horizon) / stride) + 1`` of them."""
    if history_len < 0 or horizon < 1 or stride < 1:
        raise DataError("history_len >= 0, horizon >= 1 and stride >= 1 required")
    L = len(series)
    if L < history_len + horizon:
        raise DataError(f"series of length {L} is shorter than history_len + horizon = {history_len + horizon}")
    count = (L - history_len - horizon) // stride + 1
    starts = history_len + stride * np.arange(count)
    hist_idx = starts[:, None] + np.arange(-history_len, 0)
    fut_idx = starts[:, None] + np.arange(horizon)
    return WindowSet(
        series.target[hist_idx],
        series.covariates[fut_idx],
        series.target[fut_idx],
        np.full(count, series.series_id),
        starts,
    )


@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet


def chronological_split(windows: WindowSet, fractions=(0.7, 0.1, 0.2)) -> Splits:
    """Per-series time-ordered split; the earliest windows of every series go to train."""
    if not math.isclose(sum(fractions), 1.0):
        raise DataError(f"split fractions must sum to 1, got {fractions}")
    parts = ([], [], [])
    for sid in np.unique(windows.series_id):
        rows = np.flatnonzero(windows.series_id == sid)
        rows = rows[np.argsort(windows.start[rows], kind="stable")]
        n = len(rows)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        parts[0].append(rows[:n_train])
        parts[1].append(rows[n_train:n_train + n_val])
        parts[2].append(rows[n_train + n_val:])
    train, val, test = (windows.subset(np.sort(np.concatenate(p))) for p in parts)
    if len(train) == 0:
        raise DataError("training split is empty")
    return Splits(train, val, test)


# ---------------------------------------------------------------- normalizer


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-channel z-scoring. Target stats also apply to history (same channels)."""

    target_mean: np.ndarray
    target_std: np.ndarray
    cov_mean: np.ndarray
    cov_std: np.ndarray

    def apply(self, ws: WindowSet) -> WindowSet:
        return replace(
            ws,
            history=(ws.history - self.target_mean) / self.target_std,
            covariates=(ws.covariates - self.cov_mean) / self.cov_std,
            target=(ws.target - self.target_mean) / self.target_std,
        )

    def invert(self, ws: WindowSet) -> WindowSet:
        return replace(
            ws,
            history=self.invert_target(ws.history),
            covariates=ws.covariates * self.cov_std + self.cov_mean,
            target=self.invert_target(ws.target),
        )

    def transform_target(self, x: np.ndarray) -> np.ndarray:
        """(..., time, Ct) raw -> normalised."""
        return (x - self.target_mean) / self.target_std

    def invert_target(self, x: np.ndarray) -> np.ndarray:
        return x * self.target_std + self.target_mean

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("target_mean", "target_std", "cov_mean", "cov_std")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("target_mean", "target_std", "cov_mean", "cov_std")))


def _channel_stats(values: np.ndarray, what: str):
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise DataError(f"{what} channel(s) {bad.tolist()} have zero variance on the training split")
    return mean, std


def fit_normalizer(train: WindowSet) -> Normalizer:
    """Fit z-score statistics on the training windows' target and covariate rows."""
    if len(train) == 0:
        raise DataError("cannot fit a normalizer on an empty training split")
    tm, ts = _channel_stats(train.target, "target")
    cm, cs = _channel_stats(train.covariates, "covariate")
    for a in (tm, ts, cm, cs):
        a.setflags(write=False)
    return Normalizer(tm, ts, cm, cs)


# ---------------------------------------------------------------- CSV input


@dataclass
class CsvSchema:
    timestamp: str
    target: list[str]
    covariates: list[str]

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        target = d["target"] if isinstance(d["target"], list) else [d["target"]]
        return cls(d["timestamp"], list(target), list(d.get("covariates", [])))


@dataclass
class RejectedRow:
    line: int
    reason: str


@dataclass
class CsvSeries:
    timestamps: np.ndarray  # datetime64[s]
    target: np.ndarray
    covariates: np.ndarray
    rejected: list[RejectedRow] = field(default_factory=list)


def load_csv(path, schema: CsvSchema) -> CsvSeries:
    """Read an hourly CSV.

    Rows with unparseable numbers are dropped and reported (1-based file line
    numbers, header is line 1). Timestamps must be strictly increasing.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        wanted = [schema.timestamp, *schema.target, *schema.covariates]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}; header has {header}")
        cols = [header.index(c) for c in wanted]
        stamps, values, rejected = [], [], []
        prev, prev_line = None, None
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                ts = datetime.fromisoformat(row[cols[0]].strip())
            except (ValueError, IndexError):
                rejected.append(RejectedRow(line_no, f"bad timestamp {row[cols[0]] if len(row) > cols[0] else ''!r}"))
                continue
            if prev is not None and ts <= prev:
                raise DataError(
                    f"{path}: timestamps not strictly increasing at line {line_no} "
                    f"({ts.isoformat()} after {prev.isoformat()} on line {prev_line})"
                )
            prev, prev_line = ts, line_no
            try:
                vals = [float(row[c]) for c in cols[1:]]
            except (ValueError, IndexError):
                rejected.append(RejectedRow(line_no, "unparseable value"))
                continue
            if not all(math.isfinite(v) for v in vals):
                rejected.append(RejectedRow(line_no, "non-finite value"))
                continue
            stamps.append(np.datetime64(ts, "s"))
            values.append(vals)
    if not values:
        raise DataError(f"{path}: no data rows")
    arr = np.array(values, dtype=np.float64)
    nt = len(schema.target)
    return CsvSeries(np.array(stamps, dtype="datetime64[s]"), arr[:, :nt], arr[:, nt:], rejected)


def contiguous_series(raw: CsvSeries, step=HOUR) -> list[Series]:
    """Split at gaps (e.g. left by rejected rows) into hourly-contiguous segments."""
    gaps = np.flatnonzero(np.diff(raw.timestamps) != step) + 1
    out = []
    for sid, (a, b) in enumerate(zip(np.r_[0, gaps], np.r_[gaps, len(raw.timestamps)])):
        out.append(Series(raw.target[a:b], raw.covariates[a:b], raw.timestamps[a:b], sid))
    return out


def windows_from_segments(segments: list[Series], history_len: int, horizon: int, stride: int) -> WindowSet:
    sets = [make_windows(s, history_len, horizon, stride) for s in segments if len(s) >= history_len + horizon]
    if not sets:
        raise DataError(f"no contiguous segment is long enough for history_len + horizon = {history_len + horizon}")
    return concat_windows(sets)


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticSpec:
    """Day-structured regime series.

    Every ``horizon``-long block ("day") picks a regime k uniformly and an
    intensity u ~ U(intensity_range). Its values are
    ``offset_k + sign * amplitude_k * u * sin(2 pi frequency_k h / horizon) + noise``
    where ``sign`` is -1 with probability ``flip_prob``: that gives two valid
    futures per covariate setting, the unflipped one more likely while
    ``flip_prob < 0.5``. Covariates over the day are the regime one-hot plus u.
    """

    num_series: int = 64
    series_length: int = 24 * 60
    history_len: int = 48
    horizon: int = 24
    num_regimes: int = 4
    amplitudes: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 0.3])
    frequencies: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 1.0])
    offsets: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 0.0])
    intensity_range: list = field(default_factory=lambda: [0.5, 1.5])
    noise_std: float = 0.15
    flip_prob: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_regimes < 2:
            raise DataError(f"num_regimes must be >= 2, got {self.num_regimes}")
        if self.horizon < 1:
            raise DataError("horizon must be >= 1")
        for name in ("amplitudes", "frequencies", "offsets"):
            if len(getattr(self, name)) != self.num_regimes:
                raise DataError(f"{name} needs one entry per regime ({self.num_regimes})")
        if self.history_len % self.horizon:
            raise DataError("history_len must be a multiple of horizon so targets align with days")
        if self.series_length < self.history_len + self.horizon:
            raise DataError("series_length shorter than history_len + horizon")
        if not (0.0 <= self.flip_prob < 0.5):
            raise DataError("flip_prob must lie in [0, 0.5)")
        if self.noise_std < 0:
            raise DataError("noise_std must be >= 0")
        lo, hi = self.intensity_range
        if not (0 < lo <= hi):
            raise DataError("intensity_range must satisfy 0 < low <= high")

    def waveforms(self, intensity) -> np.ndarray:
        """Unflipped regime shapes, shape (..., K, horizon)."""
        h = np.arange(self.horizon)
        amp = np.asarray(self.amplitudes, dtype=np.float64)[:, None]
        freq = np.asarray(self.frequencies, dtype=np.float64)[:, None]
        base = amp * np.sin(2.0 * np.pi * freq * h / self.horizon)
        return np.asarray(intensity, dtype=np.float64)[..., None, None] * base


@dataclass
class SyntheticOracle:
    """Closed-form truth for synthetic windows (single target channel).

    ``modes[i, m]`` is the m-th noise-free future for window i's intensity;
    ``mode_regime[m]`` is the regime it belongs to. Modes are ordered regime by
    regime (unflipped before flipped), so argmin ties favour lower regimes.
    """

    regime: np.ndarray  # (n,)
    intensity: np.ndarray  # (n,)
    cond_mean: np.ndarray  # (n, horizon, 1)
    modes: np.ndarray  # (n, M, horizon, 1)
    mode_regime: np.ndarray  # (M,)
    noise_std: float
    flip_prob: float

    def subset(self, idx) -> "SyntheticOracle":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, regime=self.regime[idx], intensity=self.intensity[idx],
                       cond_mean=self.cond_mean[idx], modes=self.modes[idx])

    def normalized(self, norm: Normalizer) -> "SyntheticOracle":
        return replace(self, cond_mean=norm.transform_target(self.cond_mean),
                       modes=norm.transform_target(self.modes),
                       noise_std=self.noise_std / float(norm.target_std[0]))


def synth_generate(spec: SyntheticSpec, rng: np.random.Generator | None = None):
    """Generate windows plus the oracle descriptor. ``rng`` defaults to ``spec.seed``."""
    spec.validate()
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    K, h = spec.num_regimes, spec.horizon
    days = math.ceil(spec.series_length / h)
    offsets = np.asarray(spec.offsets, dtype=np.float64)
    sets, meta = [], []
    for sid in range(spec.num_series):
        regime = rng.integers(0, K, size=days)
        intensity = rng.uniform(*spec.intensity_range, size=days)
        sign = np.where(rng.random(days) < spec.flip_prob, -1.0, 1.0)
        noise = spec.noise_std * rng.standard_normal((days, h))
        shapes = spec.waveforms(intensity)[np.arange(days), regime]  # (days, h)
        values = offsets[regime][:, None] + sign[:, None] * shapes + noise
        cov = np.zeros((days, h, K + 1))
        cov[np.arange(days), :, regime] = 1.0
        cov[:, :, K] = intensity[:, None]
        L = spec.series_length
        series = Series(values.reshape(-1, 1)[:L], cov.reshape(-1, K + 1)[:L], np.arange(L), sid)
        ws = make_windows(series, spec.history_len, h, stride=h)
        day = ws.start // h
        ws.regime = regime[day]
        sets.append(ws)
        meta.append((regime[day], intensity[day]))
    windows = concat_windows(sets)
    reg = np.concatenate([m[0] for m in meta])
    inten = np.concatenate([m[1] for m in meta])

    shapes = spec.waveforms(inten)  # (n, K, h)
    up = offsets[None, :, None] + shapes
    down = offsets[None, :, None] - shapes
    modes = np.stack([up, down], axis=2).reshape(len(reg), 2 * K, h)[..., None]
    mode_regime = np.repeat(np.arange(K), 2)
    picked = shapes[np.arange(len(reg)), reg]
    cond_mean = (offsets[reg][:, None] + (1.0 - 2.0 * spec.flip_prob) * picked)[..., None]
    oracle = SyntheticOracle(reg, inten, cond_mean, modes, mode_regime, spec.noise_std, spec.flip_prob)
    return windows, oracle


# ---------------------------------------------------------------- cache files


def save_dataset(path, windows: WindowSet, oracle: SyntheticOracle | None = None, extra: dict | None = None) -> None:
    """Versioned ``.npz`` cache. Byte-identical for identical inputs."""
    arrays = {
        "format_version": np.array(DATASET_FORMAT_VERSION),
        "history": windows.history,
        "covariates": windows.covariates,
        "target": windows.target,
        "series_id": windows.series_id,
        "start": windows.start,
    }
    if windows.regime is not None:
        arrays["regime"] = windows.regime
    if oracle is not None:
        arrays.update({
            "oracle_regime": oracle.regime,
            "oracle_intensity": oracle.intensity,
            "oracle_cond_mean": oracle.cond_mean,
            "oracle_modes": oracle.modes,
            "oracle_mode_regime": oracle.mode_regime,
            "oracle_noise_std": np.array(oracle.noise_std),
            "oracle_flip_prob": np.array(oracle.flip_prob),
        })
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path):
    """Returns ``(windows, oracle_or_None)``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset cache not found: {path} (run the synth command first)")
    with np.load(path) as z:
        if int(z["format_version"]) != DATASET_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported dataset format version {int(z['format_version'])}")
        windows = WindowSet(
            z["history"], z["covariates"], z["target"], z["series_id"], z["start"],
            z["regime"] if "regime" in z else None,
        )
        oracle = None
        if "oracle_modes" in z:
            oracle = SyntheticOracle(
                z["oracle_regime"], z["oracle_intensity"], z["oracle_cond_mean"], z["oracle_modes"],
                z["oracle_mode_regime"], float(z["oracle_noise_std"]), float(z["oracle_flip_prob"]),
            )
    return windows, oracle
