"""Semantic score network S(x, y) in (0, 1).

Trained as a binary classifier: a window's own noised future paired with its
covariates is a positive, another window's noised future paired with the same
covariates is a negative. Noise levels follow the diffusion forward process so
the scorer sees the same kind of states the sampler produces.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import neural
from .data import WindowSet, flatten
from .denoiser import TrainReport
from .errors import DataError, ShapeError, TrainingError
from .neural import AdamW, Mlp, mlp_backward, mlp_forward, timestep_embedding
from .schedule import NoiseSchedule, forward_noise

log = logging.getLogger(__name__)


@dataclass
class ScoreNetConfig:
    hidden: list = field(default_factory=lambda: [128, 128])
    activation: str = "silu"
    epochs: int = 400
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    negatives_per_positive: int = 1
    pair_rounds: int = 1
    use_timestep: bool = False
    embed_dim: int = 16
    val_fraction: float = 0.1


@dataclass
class PairSet:
    """Columnar collection of score pairs (one row per pair)."""

    states: np.ndarray  # (P, state_dim) noised futures
    covariates: np.ndarray  # (P, cov_dim) flattened y
    labels: np.ndarray  # (P,) in {0, 1}
    t: np.ndarray  # (P,) noising step
    window: np.ndarray  # (P,) index of the window supplying y
    source: np.ndarray  # (P,) index of the window supplying x0
    horizon: int
    target_channels: int
    covariate_channels: int
    schedule: dict

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i: int) -> "ScorePair":
        return ScorePair(self.states[i], self.covariates[i], int(self.labels[i]), int(self.t[i]))

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PairSet(self.states[idx], self.covariates[idx], self.labels[idx], self.t[idx],
                       self.window[idx], self.source[idx], self.horizon, self.target_channels,
                       self.covariate_channels, self.schedule)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair", "label", "t", "window", "source"]
                       + [f"x{i}" for i in range(self.states.shape[1])]
                       + [f"y{i}" for i in range(self.covariates.shape[1])])
            for i in range(len(self)):
                w.writerow([i, int(self.labels[i]), int(self.t[i]), int(self.window[i]), int(self.source[i])]
                           + [repr(float(v)) for v in self.states[i]] + [repr(float(v)) for v in self.covariates[i]])


@dataclass(frozen=True)
class ScorePair:
    state: np.ndarray
    covariates: np.ndarray
    label: int
    t: int


def build_pairs(windows: WindowSet, schedule: NoiseSchedule, negatives_per_positive: int,
                rng: np.random.Generator, rounds: int = 1) -> PairSet:
    """One positive and ``negatives_per_positive`` negatives per window per round.

    A negative's source window is drawn uniformly from the other windows and
    redrawn while its target equals the anchor's target exactly. Each round
    draws fresh steps, noise and negatives; rows are ordered round-major.
    """
    n = len(windows)
    if negatives_per_positive < 0 or rounds < 1:
        raise DataError("negatives_per_positive must be >= 0 and rounds >= 1")
    if negatives_per_positive and n < 2:
        raise DataError("need at least two windows to build negative pairs")
    x0 = windows.flat_targets()
    if negatives_per_positive and len(np.unique(x0, axis=0)) < 2:
        raise DataError("every window has the same target; negatives are impossible")
    y = flatten(windows.covariates)
    per = 1 + negatives_per_positive
    window = np.tile(np.repeat(np.arange(n), per), rounds)
    source = window.copy()
    labels = np.tile(np.r_[1, np.zeros(negatives_per_positive, dtype=np.int64)], n * rounds).astype(np.int64)
    for r in range(rounds):
        for i in range(n):
            for j in range(negatives_per_positive):
                while True:
                    k = int(rng.integers(n - 1))
                    k += k >= i  # skip the anchor itself
                    if not np.array_equal(x0[k], x0[i]):
                        break
                source[(r * n + i) * per + 1 + j] = k
    t = rng.integers(1, schedule.num_steps + 1, size=len(labels))
    z = rng.standard_normal((len(labels), x0.shape[1]))
    states = forward_noise(schedule, x0[source], t, z)
    return PairSet(states, y[window], labels, t, window, source, windows.horizon,
                   windows.target_channels, windows.covariate_channels, schedule.to_dict())


@dataclass(eq=False)
class ScoreNet:
    net: Mlp
    horizon: int
    target_channels: int
    covariate_channels: int
    use_timestep: bool
    embed_dim: int
    schedule: dict

    @property
    def state_dim(self) -> int:
        return self.horizon * self.target_channels

    @property
    def cov_dim(self) -> int:
        return self.horizon * self.covariate_channels

    def inputs(self, states, covariates, t=None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        covariates = np.atleast_2d(np.asarray(covariates, dtype=np.float64))
        if states.shape[1] != self.state_dim or covariates.shape[1] != self.cov_dim:
            raise ShapeError(
                f"score inputs of width ({states.shape[1]}, {covariates.shape[1]}), "
                f"model expects ({self.state_dim}, {self.cov_dim})"
            )
        if covariates.shape[0] != states.shape[0]:
            covariates = np.broadcast_to(covariates, (states.shape[0], self.cov_dim))
        parts = [states, covariates]
        if self.use_timestep:
            if t is None:
                raise ShapeError("this score network is timestep-conditioned; pass t")
            emb = timestep_embedding(t, self.embed_dim, int(self.schedule["num_steps"]))
            parts.append(np.broadcast_to(emb, (states.shape[0], self.embed_dim)) if emb.ndim == 1 else emb)
        elif t is not None:
            raise ShapeError("this score network ignores t; do not pass one")
        return np.concatenate(parts, axis=1)

    def score_batch(self, states, covariates, t=None) -> np.ndarray:
        """Scores for (rows, state_dim) states against matching or broadcast covariates."""
        return self.net(self.inputs(states, covariates, t))[:, 0]

    def to_dict(self) -> dict:
        return {
            "format_version": neural.CHECKPOINT_VERSION,
            "model_kind": "score",
            "horizon": self.horizon,
            "target_channels": self.target_channels,
            "covariate_channels": self.covariate_channels,
            "use_timestep": self.use_timestep,
            "embed_dim": self.embed_dim,
            "schedule": self.schedule,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreNet":
        if d.get("model_kind") != "score":
            raise ShapeError(f"checkpoint holds a {d.get('model_kind')!r} model, not a score network")
        if d.get("format_version") != neural.CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint format_version {d.get('format_version')}")
        model = cls(Mlp.from_dict(d["net"]), d["horizon"], d["target_channels"], d["covariate_channels"],
                    d["use_timestep"], d["embed_dim"], d["schedule"])
        expect = model.state_dim + model.cov_dim + (model.embed_dim if model.use_timestep else 0)
        if model.net.layer_dims[0] != expect or model.net.layer_dims[-1] != 1:
            raise ShapeError("checkpoint network widths disagree with its metadata")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ScoreNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def new_score_net(config: ScoreNetConfig, horizon: int, target_channels: int, covariate_channels: int,
                  schedule: dict, rng: np.random.Generator, zero_last=False) -> ScoreNet:
    width = horizon * (target_channels + covariate_channels) + (config.embed_dim if config.use_timestep else 0)
    net = Mlp.init([width, *config.hidden, 1], rng, activation=config.activation,
                   output_activation="sigmoid", zero_last=zero_last)
    return ScoreNet(net, horizon, target_channels, covariate_channels, config.use_timestep,
                    config.embed_dim, dict(schedule))


def score(model: ScoreNet, state, covariates, t=None) -> float:
    """S(state, covariates) for a single pair."""
    return float(model.score_batch(np.asarray(state)[None, :], np.asarray(covariates)[None, :], t)[0])


def bce_loss(model: ScoreNet, pairs: PairSet):
    """Mean binary cross-entropy and its parameter gradients, computed on logits."""
    t = pairs.t if model.use_timestep else None
    p, cache = mlp_forward(model.net, model.inputs(pairs.states, pairs.covariates, t))
    logit = cache.pre[-1][:, 0]
    y = pairs.labels.astype(np.float64)
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    grads, _ = mlp_backward(model.net, cache, (p - y[:, None]) / len(y), skip_output_activation=True)
    return loss, grads


def train_score_net(config: ScoreNetConfig, pairs: PairSet, rng: np.random.Generator, seed: int | None = None):
    """BCE training with AdamW; the last ``val_fraction`` of windows is held out."""
    labels = set(np.unique(pairs.labels).tolist())
    if labels != {0, 1}:
        raise DataError(f"score training needs both labels, got {sorted(labels)}")
    n_windows = int(pairs.window.max()) + 1
    cut = n_windows - int(round(config.val_fraction * n_windows))
    train_p = pairs.subset(np.flatnonzero(pairs.window < cut))
    val_p = pairs.subset(np.flatnonzero(pairs.window >= cut))
    model = new_score_net(config, pairs.horizon, pairs.target_channels, pairs.covariate_channels,
                          pairs.schedule, rng)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    report = TrainReport(seed=seed)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_p))
        total = 0.0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = bce_loss(model, train_p.subset(idx))
            if not np.isfinite(loss):
                raise TrainingError(f"score-net loss became {loss} at epoch {epoch}")
            neural.adamw_step(opt, model.net, grads)
            total += loss * len(idx)
        report.losses.append(total / len(train_p))
        v = bce_loss(model, val_p)[0] if len(val_p) else float("nan")
        report.val_losses.append(v)
        if epoch % 50 == 0:
            log.info("score epoch %d bce %.5f val %.5f", epoch, report.losses[-1], v)
    report.epochs = config.epochs
    report.best_epoch = config.epochs
    if report.val_losses:
        report.final_val_loss = float(report.val_losses[-1])
    return model, report


def auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
