"""Command-line entry point: ``semguide {synth,train,forecast,eval,sweep}``.

Every command takes the same JSON config. Flags only pick the command and
override the seed or output directory. Relative output directories are placed
under ``$SEMGUIDE_OUTPUT_ROOT`` when it is set.

Primary outputs (dataset cache, checkpoints, loss logs, forecasts, metrics)
are byte-identical across reruns with the same config and seed. Timestamps and
timings go to ``run.log`` only (and to the ``wall_s`` column of sweep.csv).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, resolve
from .data import (Normalizer, chronological_split, contiguous_series, fit_normalizer, load_csv, load_dataset,
                   save_dataset, synth_generate, windows_from_segments)
from .denoiser import Denoiser, conditioning_matrix, train_denoiser
from .errors import DataError, SemGuideError, ShapeError
from .evaluation import evaluate, sample_efficiency_sweep, write_metrics_csv
from .sampler import METHODS, forecast_batch
from .scorenet import ScoreNet, build_pairs, train_score_net

log = logging.getLogger("semguide")

OUTPUT_ROOT_ENV = "SEMGUIDE_OUTPUT_ROOT"
DATASET_FILE = "dataset.npz"
NORMALIZER_FILE = "normalizer.json"
DENOISER_FILE = "denoiser.json"
SCORE_FILE = "score.json"
FORECAST_FILE = "forecasts.csv"
METRICS_FILE = "metrics.csv"
SWEEP_FILE = "sweep.csv"


# ---------------------------------------------------------------- helpers


def _out(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path) -> None:
    cfg.dump(out / "config.resolved.json")


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def _rng(cfg: RunConfig, stream: int) -> np.random.Generator:
    # independent streams per stage, so `train --only score` reproduces a full run's score net
    return np.random.default_rng([cfg.seed, stream])


class Prepared:
    """Dataset cache split and normalised the way every command sees it."""

    def __init__(self, cfg: RunConfig, out: Path, need_normalizer_file: bool = False):
        windows, oracle = load_dataset(out / DATASET_FILE)
        self.splits = chronological_split(windows, tuple(cfg.raw["dataset"]["splits"]))
        norm_path = out / NORMALIZER_FILE
        if need_normalizer_file:
            if not norm_path.exists():
                raise DataError(f"{norm_path} not found (run the train command first)")
            with open(norm_path) as fh:
                self.norm = Normalizer.from_dict(json.load(fh))
        else:
            self.norm = fit_normalizer(self.splits.train)
        self.oracle = oracle
        self.train = self.norm.apply(self.splits.train)
        self.val = self.norm.apply(self.splits.val)
        test = self.norm.apply(self.splits.test)
        limit = cfg.raw["eval"]["max_windows"]
        self.test = test if limit is None else test.subset(np.arange(min(limit, len(test))))


def _load_models(cfg: RunConfig, out: Path, prep: Prepared, need_score: bool):
    path = out / DENOISER_FILE
    if not path.exists():
        raise DataError(f"{path} not found (run the train command first)")
    model = Denoiser.load(path)
    schedule = cfg.schedule()
    if model.schedule != schedule.to_dict():
        raise ShapeError(f"{path} was trained with schedule {model.schedule}, config has {schedule.to_dict()}")
    t = prep.test
    if (model.horizon, model.target_channels, model.covariate_channels) != (t.horizon, t.target_channels,
                                                                           t.covariate_channels):
        raise ShapeError(f"{path} expects horizon/target/covariate dims "
                         f"{(model.horizon, model.target_channels, model.covariate_channels)}, dataset has "
                         f"{(t.horizon, t.target_channels, t.covariate_channels)}")
    if model.use_history and model.history_len != t.history_len:
        raise ShapeError(f"{path} expects history_len {model.history_len}, dataset has {t.history_len}")
    score_model = None
    spath = out / SCORE_FILE
    if need_score or spath.exists():
        if not spath.exists():
            raise DataError(f"{spath} not found (run the train command first)")
        score_model = ScoreNet.load(spath)
        if score_model.state_dim != model.state_dim or score_model.cov_dim != t.horizon * t.covariate_channels:
            raise ShapeError(f"{spath} does not match the dataset's forecast/covariate shape")
    return model, score_model, schedule


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig) -> Path:
    """Generate (or ingest) the dataset and cache it as ``dataset.npz``."""
    out = _out(cfg)
    _echo_config(cfg, out)
    ds = cfg.raw["dataset"]
    if ds["kind"] == "synthetic":
        windows, oracle = synth_generate(cfg.synthetic_spec())
        log.info("generated %d synthetic windows", len(windows))
    else:
        c = ds["csv"]
        raw = load_csv(c["path"], cfg.csv_schema())
        with open(out / "rejected_rows.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["line", "reason"])
            w.writerows([r.line, r.reason] for r in raw.rejected)
        windows = windows_from_segments(contiguous_series(raw), c["history_len"], c["horizon"], c["stride"])
        oracle = None
        log.info("ingested %s: %d windows, %d rejected rows", c["path"], len(windows), len(raw.rejected))
    path = out / DATASET_FILE
    save_dataset(path, windows, oracle)
    return path


def cmd_train(cfg: RunConfig, only: str | None = None) -> None:
    """Train the denoiser then the score net (independently), or just one of them."""
    out = _out(cfg)
    _echo_config(cfg, out)
    prep = Prepared(cfg, out)
    _write_json(out / NORMALIZER_FILE, prep.norm.to_dict())
    schedule = cfg.schedule()
    if only in (None, "denoiser"):
        dcfg = cfg.denoiser()
        rng = _rng(cfg, 1)
        model, report = train_denoiser(dcfg, type(prep.splits)(prep.train, prep.val, prep.test), schedule, rng,
                                       seed=cfg.seed)
        model.save(out / DENOISER_FILE)
        report.write_csv(out / "denoiser_log.csv")
        log.info("denoiser trained: %d epochs, best val %.5f", report.epochs, report.final_val_loss)
    if only in (None, "score"):
        scfg = cfg.scorenet()
        rng = _rng(cfg, 2)
        pairs = build_pairs(prep.train, schedule, scfg.negatives_per_positive, rng, rounds=scfg.pair_rounds)
        smodel, sreport = train_score_net(scfg, pairs, rng, seed=cfg.seed)
        smodel.save(out / SCORE_FILE)
        sreport.write_csv(out / "score_log.csv")
        log.info("score net trained: %d epochs on %d pairs", sreport.epochs, len(pairs))


def cmd_forecast(cfg: RunConfig) -> Path:
    """Forecast every test window with each configured method into ``forecasts.csv``."""
    out = _out(cfg)
    _echo_config(cfg, out)
    prep = Prepared(cfg, out, need_normalizer_file=True)
    s = cfg.raw["sampler"]
    for m in s["methods"]:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; valid methods: {', '.join(METHODS)}")
    model, score_model, schedule = _load_models(cfg, out, prep, "semguide" in s["methods"])
    conds = conditioning_matrix(prep.test, model.use_history)
    path = out / FORECAST_FILE
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "n", "window", "series_id", "start"] + [f"f{j}" for j in range(model.state_dim)])
        for method in s["methods"]:
            n = 1 if method == "ddpm" else s["n"]
            f = forecast_batch(method, model, schedule, conds, n, _rng(cfg, 3), score_model=score_model,
                               resample=s["resample"])
            for i in range(len(f)):
                w.writerow([method, n, int(prep.test.index[i]), int(prep.test.series_id[i]),
                            int(prep.test.start[i])] + [repr(float(v)) for v in f[i]])
            log.info("forecast %s n=%d on %d windows", method, n, len(f))
    return path


def read_forecasts(path) -> list[tuple[str, int, np.ndarray, np.ndarray]]:
    """Groups of ``(method, n, window_index, forecasts)`` in file order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path} not found (run the forecast command first)")
    groups: dict = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != ["method", "n", "window", "series_id", "start"]:
            raise DataError(f"{path}: not a forecasts file")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: line {line_no} has {len(row)} fields, expected {len(header)}")
            key = (row[0], int(row[1]))
            groups.setdefault(key, ([], []))
            groups[key][0].append(int(row[2]))
            groups[key][1].append([float(v) for v in row[5:]])
    return [(m, n, np.array(idx), np.array(vals)) for (m, n), (idx, vals) in groups.items()]


def cmd_eval(cfg: RunConfig) -> Path:
    """Score ``forecasts.csv`` against the test split into ``metrics.csv``."""
    out = _out(cfg)
    _echo_config(cfg, out)
    prep = Prepared(cfg, out, need_normalizer_file=True)
    score_path = out / SCORE_FILE
    score_model = ScoreNet.load(score_path) if score_path.exists() else None
    reports = []
    for method, n, idx, f in read_forecasts(out / FORECAST_FILE):
        if not np.array_equal(idx, prep.test.index):
            raise ShapeError(f"forecasts for {method} cover windows {idx[:5].tolist()}..., "
                             f"test split has {prep.test.index[:5].tolist()}...")
        if f.shape[1] != prep.test.flat_targets().shape[1]:
            raise ShapeError(f"forecast width {f.shape[1]} != target width {prep.test.flat_targets().shape[1]}")
        sm = score_model if score_model is not None and score_model.state_dim == f.shape[1] else None
        reports.append(evaluate(method, n, f, prep.test, prep.norm, prep.oracle, sm))
        r = reports[-1]
        log.info("%s n=%d: mse %.5f mae %.5f", method, n, r.mse, r.mae)
    path = out / METRICS_FILE
    write_metrics_csv(path, reports)
    return path


def cmd_sweep(cfg: RunConfig) -> Path:
    """Sample-efficiency sweep over the configured grid into ``sweep.csv``."""
    out = _out(cfg)
    _echo_config(cfg, out)
    prep = Prepared(cfg, out, need_normalizer_file=True)
    e = cfg.raw["eval"]
    model, score_model, schedule = _load_models(cfg, out, prep, "semguide" in e["sweep_methods"])
    conds = conditioning_matrix(prep.test, model.use_history)
    seeds = [cfg.seed + k for k in range(e["sweep_seeds"])]
    result = sample_efficiency_sweep(model, score_model, schedule, prep.test, conds, e["sweep_grid"], seeds,
                                     e["sweep_methods"], log=log.info)
    path = out / SWEEP_FILE
    result.write_csv(path)
    return path


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semguide", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("synth", "generate or ingest the dataset cache"),
                        ("train", "train the denoiser and the score network"),
                        ("forecast", "forecast the test split"),
                        ("eval", "compute metrics.csv from forecasts.csv"),
                        ("sweep", "sample-efficiency sweep into sweep.csv")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", "-c", help="JSON run config (defaults used when omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--output-dir", "-o", help="override the config output_dir")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            sp.add_argument("--only", choices=["denoiser", "score"], help="train just one of the two models")
    return p


def _setup_logging(out: Path, verbose: bool) -> None:
    root = logging.getLogger("semguide")
    root.setLevel(logging.INFO)
    root.handlers.clear()
    err = logging.StreamHandler(sys.stderr)
    err.setLevel(logging.INFO if verbose else logging.WARNING)
    err.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    fileh = logging.FileHandler(out / "run.log")
    fileh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root.addHandler(err)
    root.addHandler(fileh)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else resolve({})
        cfg = cfg.with_overrides(seed=args.seed, output_dir=args.output_dir)
        _setup_logging(_out(cfg), args.verbose)
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "train":
            cmd_train(cfg, args.only)
        elif args.command == "forecast":
            print(cmd_forecast(cfg))
        elif args.command == "eval":
            print(cmd_eval(cfg))
        else:
            print(cmd_sweep(cfg))
    except SemGuideError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
