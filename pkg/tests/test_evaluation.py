import numpy as np
import pytest

from semguide.data import Normalizer, SyntheticOracle, WindowSet, flatten
from semguide.denoiser import DenoiserConfig, conditioning_matrix, new_denoiser
from semguide.errors import DataError, ShapeError
from semguide.evaluation import (SWEEP_COLUMNS, evaluate, mae, mse, read_metrics_csv, regime_accuracy,
                                 sample_efficiency_sweep, write_metrics_csv)
from semguide.scorenet import ScoreNetConfig, new_score_net


def test_metric_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert mse(x, x) == 0.0 and mae(x, x) == 0.0
    assert mse(x + 2, x) == 4.0 and mae(x + 2, x) == 2.0
    assert mse([1.0, -3.0], [0.0, 0.0]) == 5.0 and mae([1.0, -3.0], [0.0, 0.0]) == 2.0
    with pytest.raises(ShapeError):
        mse([1.0], [1.0, 2.0])


def test_metric_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((5, 7))
    assert mse(a, b) == mse(b, a) and mae(a, b) == mae(b, a)


def _oracle(regime, modes):
    modes = np.asarray(modes, dtype=float)[..., None]  # (n, M, h, 1)
    K = modes.shape[1] // 2
    return SyntheticOracle(np.asarray(regime), np.ones(len(regime)), modes[:, 0], modes,
                           np.repeat(np.arange(K), 2), 0.0, 0.0)


def test_regime_accuracy_examples():
    # two regimes, each with an up and a down mode, horizon 2
    modes = [[[1, 1], [-1, -1], [3, 0], [-3, 0]]] * 2
    o = _oracle([0, 1], modes)
    assert regime_accuracy([[1, 1], [3, 0]], o) == 1.0
    assert regime_accuracy([[-1, -1], [-3, 0]], o) == 1.0  # flipped modes still belong to their regime
    assert regime_accuracy([[3, 0], [1, 1]], o) == 0.0
    # (2, 0.5) is equidistant from (1, 1) [regime 0] and (3, 0) [regime 1]: lower regime wins
    assert regime_accuracy([[2, 0.5]], _oracle([0], modes[:1])) == 1.0
    assert regime_accuracy([[2, 0.5]], _oracle([1], modes[:1])) == 0.0
    with pytest.raises(DataError):
        regime_accuracy([[1, 1]], None)
    with pytest.raises(ShapeError):
        regime_accuracy([[1, 1, 1]], _oracle([0], modes[:1]))


def test_evaluate_denormalised_scaling(task):
    ws = task.splits.test
    norm = task.norm
    rng = np.random.default_rng(0)
    f = ws.flat_targets() + rng.standard_normal(ws.flat_targets().shape) * 0.3
    r = evaluate("x", 1, f, ws, norm)
    sd = float(norm.target_std[0])
    assert r.mse_denorm == pytest.approx(r.mse * sd * sd, rel=1e-12)
    assert r.mae_denorm == pytest.approx(r.mae * sd, rel=1e-12)
    assert r.window_errors.shape == f.shape and r.num_windows == len(ws)
    assert r.regime_accuracy is None and r.mean_consistency_score is None


def test_evaluate_multichannel_scaling():
    rng = np.random.default_rng(1)
    target = rng.standard_normal((4, 3, 2))
    ws = WindowSet(np.zeros((4, 3, 2)), np.zeros((4, 3, 1)), target, np.zeros(4, int), np.arange(4))
    norm = Normalizer(np.array([5.0, -1.0]), np.array([2.0, 10.0]), np.zeros(1), np.ones(1))
    f = flatten(target) + 0.5  # channel 0 errors fill the first 3 columns, channel 1 the last 3
    r = evaluate("x", 1, f, ws, norm)
    assert r.mse == pytest.approx(0.25)
    assert r.mse_denorm == pytest.approx(0.25 * (4.0 + 100.0) / 2)
    assert r.mae_denorm == pytest.approx(0.5 * (2.0 + 10.0) / 2)


def test_evaluate_with_oracle_and_score(task):
    ws = task.splits.test
    o = task.oracle.subset(ws.index).normalized(task.norm)
    sn = new_score_net(ScoreNetConfig(hidden=[4]), ws.horizon, 1, ws.covariate_channels, task.schedule.to_dict(),
                       np.random.default_rng(0), zero_last=True)
    r = evaluate("oracle", 1, flatten(o.cond_mean), ws, task.norm, task.oracle, sn)
    assert r.regime_accuracy == 1.0
    assert r.mean_consistency_score == 0.5


def test_metrics_csv_round_trip(task, tmp_path):
    ws = task.splits.test
    r = evaluate("truth", 1, ws.flat_targets(), ws, task.norm)
    write_metrics_csv(tmp_path / "m.csv", [r])
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert float(rows[0]["mse"]) == 0.0 and float(rows[0]["mae"]) == 0.0
    assert rows[0]["regime_accuracy"] == ""


@pytest.fixture(scope="module")
def tiny(task):
    rng = np.random.default_rng(0)
    den = new_denoiser(DenoiserConfig(hidden=[16], embed_dim=4), task.splits.train, task.schedule, rng)
    ws = task.splits.train
    sn = new_score_net(ScoreNetConfig(hidden=[8]), ws.horizon, 1, ws.covariate_channels, task.schedule.to_dict(), rng)
    test = task.splits.test.subset(np.arange(10))
    return den, sn, test, conditioning_matrix(test)


def test_sweep_degenerate_grid(task, tiny, tmp_path):
    den, sn, test, conds = tiny
    res = sample_efficiency_sweep(den, sn, task.schedule, test, conds, grid=[1], seeds=[0, 1])
    for seed in (0, 1):
        b = [r for r in res.cell("baseline", 1) if r["seed"] == seed][0]
        s = [r for r in res.cell("semguide", 1) if r["seed"] == seed][0]
        assert b["mse"] == s["mse"] and b["mae"] == s["mae"]
    res.write_csv(tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) == "method,n,seed,mse,mae,wall_s"
    assert len(lines) == 1 + 4


def test_sweep_every_cell_and_determinism(task, tiny):
    den, sn, test, conds = tiny
    a = sample_efficiency_sweep(den, sn, task.schedule, test, conds, grid=[2, 3], seeds=[0, 1])
    b = sample_efficiency_sweep(den, sn, task.schedule, test, conds, grid=[2, 3], seeds=[0, 1])
    for m in ("baseline", "semguide"):
        for n in (2, 3):
            assert len(a.cell(m, n)) == 2
            assert a.mean(m, n) == b.mean(m, n)
        assert a.spread(m) >= 0
    with pytest.raises(ValueError):
        sample_efficiency_sweep(den, None, task.schedule, test, conds, grid=[1], seeds=[0])
