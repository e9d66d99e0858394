"""Run configuration: one JSON file drives every command.

The file is validated against :data:`SCHEMA` (unknown keys are rejected), then
merged over :data:`DEFAULTS`. The resolved document is what gets echoed next to
a run's outputs.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .data import CsvSchema, SyntheticSpec
from .denoiser import DenoiserConfig
from .errors import ConfigError
from .schedule import make_linear_schedule
from .scorenet import ScoreNetConfig

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "synthetic",
        "splits": [0.7, 0.1, 0.2],
        "synthetic": {
            "num_series": 64,
            "series_length": 1440,
            "history_len": 48,
            "horizon": 24,
            "num_regimes": 4,
            "amplitudes": [1.0, 1.0, 1.0, 0.3],
            "frequencies": [1.0, 2.0, 3.0, 1.0],
            "offsets": [0.0, 0.0, 0.0, 0.0],
            "intensity_range": [0.5, 1.5],
            "noise_std": 0.15,
            "flip_prob": 0.0,
        },
        "csv": {
            "path": None,
            "schema": {"timestamp": "timestamp", "target": ["price"], "covariates": []},
            "history_len": 168,
            "horizon": 24,
            "stride": 24,
        },
    },
    "schedule": {"num_steps": 200, "beta_start": 1e-4, "beta_end": 0.05},
    "denoiser": {
        "hidden": [256, 256],
        "activation": "silu",
        "embed_dim": 32,
        "use_history": True,
        "epochs": 500,
        "lr": 1e-4,
        "weight_decay": 1e-5,
        "batch_size": 64,
    },
    "scorenet": {
        "hidden": [128, 128],
        "activation": "silu",
        "epochs": 400,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "batch_size": 64,
        "negatives_per_positive": 1,
        "pair_rounds": 1,
        "use_timestep": False,
        "embed_dim": 16,
        "val_fraction": 0.1,
    },
    "sampler": {"methods": ["baseline", "semguide"], "n": 10, "resample": False},
    "eval": {
        "max_windows": None,
        "sweep_grid": [10, 20, 50, 100],
        "sweep_seeds": 5,
        "sweep_methods": ["baseline", "semguide"],
    },
}

_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_rate = {"type": "number", "exclusiveMinimum": 0}
_widths = {"type": "array", "items": _pos_int}
_activation = {"enum": ["identity", "tanh", "relu", "silu", "sigmoid"]}
_methods = {"type": "array", "items": {"enum": ["ddpm", "baseline", "semguide"]}, "minItems": 1}
_reals = {"type": "array", "items": {"type": "number"}}


def _section(props: dict) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = _section({
    "seed": _nonneg_int,
    "output_dir": {"type": "string", "minLength": 1},
    "dataset": _section({
        "kind": {"enum": ["synthetic", "csv"]},
        "splits": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "synthetic": _section({
            "num_series": _pos_int,
            "series_length": _pos_int,
            "history_len": _pos_int,
            "horizon": _pos_int,
            "num_regimes": {"type": "integer", "minimum": 2},
            "amplitudes": _reals,
            "frequencies": _reals,
            "offsets": _reals,
            "intensity_range": {**_reals, "minItems": 2, "maxItems": 2},
            "noise_std": {"type": "number", "minimum": 0},
            "flip_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 0.5},
        }),
        "csv": _section({
            "path": {"type": ["string", "null"]},
            "schema": {
                **_section({
                    "timestamp": {"type": "string"},
                    "target": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                    "covariates": {"type": "array", "items": {"type": "string"}},
                }),
            },
            "history_len": _pos_int,
            "horizon": _pos_int,
            "stride": _pos_int,
        }),
    }),
    "schedule": _section({
        "num_steps": _pos_int,
        "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    }),
    "denoiser": _section({
        "hidden": _widths,
        "activation": _activation,
        "embed_dim": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "use_history": {"type": "boolean"},
        "epochs": _nonneg_int,
        "lr": _rate,
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": _pos_int,
    }),
    "scorenet": _section({
        "hidden": _widths,
        "activation": _activation,
        "epochs": _nonneg_int,
        "lr": _rate,
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": _pos_int,
        "negatives_per_positive": _nonneg_int,
        "pair_rounds": _pos_int,
        "use_timestep": {"type": "boolean"},
        "embed_dim": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    }),
    "sampler": _section({
        "methods": _methods,
        "n": _pos_int,
        "resample": {"type": "boolean"},
    }),
    "eval": _section({
        "max_windows": {"type": ["integer", "null"], "minimum": 1},
        "sweep_grid": {"type": "array", "items": _pos_int, "minItems": 1},
        "sweep_seeds": _pos_int,
        "sweep_methods": _methods,
    }),
})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pick(cls, section: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in section.items() if k in names})


@dataclass
class RunConfig:
    raw: dict  # fully resolved document

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def synthetic_spec(self) -> SyntheticSpec:
        return _pick(SyntheticSpec, {**self.raw["dataset"]["synthetic"], "seed": self.seed})

    def csv_schema(self) -> CsvSchema:
        return CsvSchema.from_dict(self.raw["dataset"]["csv"]["schema"])

    def schedule(self):
        s = self.raw["schedule"]
        return make_linear_schedule(s["num_steps"], s["beta_start"], s["beta_end"])

    def denoiser(self) -> DenoiserConfig:
        return _pick(DenoiserConfig, self.raw["denoiser"])

    def scorenet(self) -> ScoreNetConfig:
        return _pick(ScoreNetConfig, self.raw["scorenet"])

    def with_overrides(self, seed: int | None = None, output_dir=None) -> "RunConfig":
        over = {}
        if seed is not None:
            over["seed"] = seed
        if output_dir is not None:
            over["output_dir"] = str(output_dir)
        return resolve(_merge(self.raw, over))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.raw, fh, indent=2, sort_keys=True)
            fh.write("\n")


def resolve(doc: dict | None = None) -> RunConfig:
    """Validate a (partial) config document and fill in defaults."""
    doc = {} if doc is None else doc
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {e.message}")
    full = _merge(DEFAULTS, doc)
    _check_semantics(full)
    return RunConfig(full)


def _check_semantics(full: dict) -> None:
    s = full["schedule"]
    if s["beta_start"] > s["beta_end"]:
        raise ConfigError("config field schedule.beta_start: must not exceed schedule.beta_end")
    syn = full["dataset"]["synthetic"]
    for name in ("amplitudes", "frequencies", "offsets"):
        if len(syn[name]) != syn["num_regimes"]:
            raise ConfigError(f"config field dataset.synthetic.{name}: needs {syn['num_regimes']} entries "
                              f"(one per regime), got {len(syn[name])}")
    if syn["history_len"] % syn["horizon"]:
        raise ConfigError("config field dataset.synthetic.history_len: must be a multiple of horizon")
    if abs(sum(full["dataset"]["splits"]) - 1.0) > 1e-9:
        raise ConfigError("config field dataset.splits: fractions must sum to 1")
    if full["dataset"]["kind"] == "csv" and not full["dataset"]["csv"]["path"]:
        raise ConfigError("config field dataset.csv.path: required when dataset.kind is 'csv'")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(doc)
