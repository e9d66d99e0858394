"""Conditional noise-prediction backbone eps(x_t, cond, t) and its training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import neural
from .data import Splits, Window, WindowSet, flatten
from .errors import DataError, ShapeError, TrainingError
from .neural import AdamW, Mlp, mlp_backward, mlp_forward, timestep_embedding
from .schedule import NoiseSchedule, forward_noise

log = logging.getLogger(__name__)


@dataclass
class DenoiserConfig:
    hidden: list = field(default_factory=lambda: [256, 256])
    activation: str = "silu"
    embed_dim: int = 32
    use_history: bool = True
    epochs: int = 500
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 64


@dataclass(eq=False)
class Denoiser:
    net: Mlp
    horizon: int
    target_channels: int
    covariate_channels: int
    history_len: int
    embed_dim: int
    use_history: bool
    schedule: dict  # parameters of the schedule it was trained against

    @property
    def state_dim(self) -> int:
        return self.horizon * self.target_channels

    @property
    def cond_dim(self) -> int:
        c = self.horizon * self.covariate_channels
        if self.use_history:
            c += self.history_len * self.target_channels
        return c

    @property
    def num_steps(self) -> int:
        return int(self.schedule["num_steps"])

    def inputs(self, x_t, cond, t) -> np.ndarray:
        """Assemble the network input rows [x_t, cond, emb(t)]."""
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        if x_t.shape[1] != self.state_dim:
            raise ShapeError(f"x_t has width {x_t.shape[1]}, model expects {self.state_dim}")
        if cond.shape[1] != self.cond_dim:
            raise ShapeError(f"cond has width {cond.shape[1]}, model expects {self.cond_dim}")
        if cond.shape[0] != x_t.shape[0]:
            cond = np.broadcast_to(cond, (x_t.shape[0], cond.shape[1]))
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.num_steps):
            raise ShapeError(f"step {t} outside [1, {self.num_steps}]")
        emb = timestep_embedding(t, self.embed_dim, self.num_steps)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x_t.shape[0], self.embed_dim))
        return np.concatenate([x_t, cond, emb], axis=1)

    def to_dict(self) -> dict:
        return {
            "format_version": neural.CHECKPOINT_VERSION,
            "model_kind": "denoiser",
            "horizon": self.horizon,
            "target_channels": self.target_channels,
            "covariate_channels": self.covariate_channels,
            "history_len": self.history_len,
            "embed_dim": self.embed_dim,
            "use_history": self.use_history,
            "schedule": self.schedule,
            "net": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Denoiser":
        if d.get("model_kind") != "denoiser":
            raise ShapeError(f"checkpoint holds a {d.get('model_kind')!r} model, not a denoiser")
        if d.get("format_version") != neural.CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint format_version {d.get('format_version')}")
        model = cls(Mlp.from_dict(d["net"]), d["horizon"], d["target_channels"], d["covariate_channels"],
                    d["history_len"], d["embed_dim"], d["use_history"], d["schedule"])
        expect_in = model.state_dim + model.cond_dim + model.embed_dim
        if model.net.layer_dims[0] != expect_in or model.net.layer_dims[-1] != model.state_dim:
            raise ShapeError("checkpoint network widths disagree with its metadata")
        return model

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Denoiser":
        return cls.from_dict(json.loads(Path(path).read_text()))


def new_denoiser(config: DenoiserConfig, windows: WindowSet, schedule: NoiseSchedule,
                 rng: np.random.Generator) -> Denoiser:
    state_dim = windows.horizon * windows.target_channels
    cond_dim = windows.horizon * windows.covariate_channels
    if config.use_history:
        cond_dim += windows.history_len * windows.target_channels
    dims = [state_dim + cond_dim + config.embed_dim, *config.hidden, state_dim]
    net = Mlp.init(dims, rng, activation=config.activation)
    return Denoiser(net, windows.horizon, windows.target_channels, windows.covariate_channels,
                    windows.history_len, config.embed_dim, config.use_history, schedule.to_dict())


def predict_noise(model: Denoiser, x_t, cond, t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    out = model.net(model.inputs(x_t, cond, t))
    return out[0] if x_t.ndim == 1 else out


def build_conditioning(window: Window, use_history: bool = True) -> np.ndarray:
    """[flatten(covariates); flatten(history)] with covariates first."""
    if window.covariates is None or np.size(window.covariates) == 0:
        raise DataError("window has no covariates")
    parts = [flatten(window.covariates)]
    if use_history:
        parts.append(flatten(window.history))
    return np.concatenate(parts)


def conditioning_matrix(windows: WindowSet, use_history: bool = True) -> np.ndarray:
    """Row-wise :func:`build_conditioning` for a whole window set."""
    parts = [flatten(windows.covariates)]
    if use_history:
        parts.append(flatten(windows.history))
    return np.concatenate(parts, axis=1)


def denoising_loss(model: Denoiser, schedule: NoiseSchedule, batch: WindowSet, rng: np.random.Generator,
                   *, conds=None):
    """Mean over the batch of ||z - eps(x_t, cond, t)||^2, one t ~ U{1..T} per example.

    Returns ``(loss, param_grads)``.
    """
    if len(batch) == 0:
        raise DataError("empty batch")
    x0 = batch.flat_targets()
    if conds is None:
        conds = conditioning_matrix(batch, model.use_history)
    n = len(x0)
    t = rng.integers(1, schedule.num_steps + 1, size=n)
    z = rng.standard_normal(x0.shape)
    x_t = forward_noise(schedule, x0, t, z)
    pred, cache = mlp_forward(model.net, model.inputs(x_t, conds, t))
    diff = pred - z
    loss = float(np.sum(diff * diff) / n)
    grads, _ = mlp_backward(model.net, cache, 2.0 * diff / n)
    return loss, grads


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)
    final_val_loss: float = float("nan")
    epochs: int = 0
    seed: int | None = None
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        lines = ["epoch,loss,val_loss"]
        for i, (l, v) in enumerate(zip(self.losses, self.val_losses), start=1):
            lines.append(f"{i},{l!r},{v!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def _val_loss(model, schedule, windows: WindowSet, seed: int) -> float:
    # fixed noise draws so epoch-to-epoch numbers are comparable
    if len(windows) == 0:
        return float("nan")
    rng = np.random.default_rng(seed)
    x0 = windows.flat_targets()
    t = rng.integers(1, schedule.num_steps + 1, size=len(x0))
    z = rng.standard_normal(x0.shape)
    pred = model.net(model.inputs(forward_noise(schedule, x0, t, z), conditioning_matrix(windows, model.use_history), t))
    return float(np.mean(np.sum((pred - z) ** 2, axis=1)))


def train_denoiser(config: DenoiserConfig, splits: Splits, schedule: NoiseSchedule,
                   rng: np.random.Generator, seed: int | None = None):
    """Train with AdamW and keep the parameters of the best validation epoch.

    With no validation windows the last epoch is kept.
    """
    train, val = splits.train, splits.val
    if len(train) == 0:
        raise DataError("empty training split")
    model = new_denoiser(config, train, schedule, rng)
    report = TrainReport(seed=seed)
    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    conds = conditioning_matrix(train, config.use_history)
    val_seed = int(rng.integers(2**31))
    best, best_val = model.net.copy(), np.inf
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            loss, grads = denoising_loss(model, schedule, train.subset(idx), rng, conds=conds[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"denoiser loss became {loss} at epoch {epoch}")
            neural.adamw_step(opt, model.net, grads)
            total += loss * len(idx)
            count += len(idx)
        if not neural.all_finite(model.net.params()):
            raise TrainingError(f"denoiser parameters became non-finite at epoch {epoch}")
        report.losses.append(total / count)
        v = _val_loss(model, schedule, val, val_seed)
        report.val_losses.append(v)
        if len(val) == 0 or v < best_val:
            best_val, best = v, model.net.copy()
            report.best_epoch = epoch
        if epoch % 50 == 0:
            log.info("denoiser epoch %d loss %.5f val %.5f", epoch, report.losses[-1], v)
    report.epochs = config.epochs
    if config.epochs:
        model.net = best
        report.final_val_loss = float(best_val)
    return model, report
