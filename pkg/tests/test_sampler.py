from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semguide import sampler
from semguide.denoiser import DenoiserConfig, conditioning_matrix, new_denoiser
from semguide.errors import ShapeError
from semguide.sampler import (ddpm_sample, effective_sample_size, forecast_batch, importance_weights, median_forecast,
                              semguide_sample, weighted_center)
from semguide.schedule import make_linear_schedule
from semguide.scorenet import ScoreNetConfig, new_score_net


def test_importance_weight_examples():
    np.testing.assert_allclose(importance_weights([1, 1, 1, 1]), [0.25] * 4, rtol=0, atol=1e-15)
    np.testing.assert_allclose(importance_weights([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(importance_weights([2, 6]), [0.25, 0.75])
    for bad in ([0, 0], [1, -1], [np.nan, 1]):
        with pytest.raises(ValueError):
            importance_weights(bad)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=50), st.floats(1e-3, 1e3))
def test_weights_invariant_to_positive_scaling(scores, c):
    w = importance_weights(scores)
    np.testing.assert_allclose(importance_weights(np.asarray(scores) * c), w, rtol=1e-12, atol=0)
    assert abs(w.sum() - 1.0) < 1e-9 and w.min() >= 0


def test_weighted_center_examples():
    x = np.array([[0.0], [10.0]])
    np.testing.assert_array_equal(weighted_center(x, [0.25, 0.75]), [7.5])
    pts = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(weighted_center(pts, [0, 0, 1, 0, 0]), pts[2])
    np.testing.assert_allclose(weighted_center(pts, np.full(5, 0.2)), pts.mean(axis=0), rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        weighted_center(pts, [0.5, 0.5])


def test_effective_sample_size():
    assert effective_sample_size([0.25] * 4) == 4.0
    assert effective_sample_size([1.0, 0.0, 0.0]) == 1.0


# ---------------------------------------------------------------- real (random) networks


@pytest.fixture(scope="module")
def models(task):
    rng = np.random.default_rng(0)
    den = new_denoiser(DenoiserConfig(hidden=[16], embed_dim=4), task.splits.train, task.schedule, rng)
    ws = task.splits.train
    sn = new_score_net(ScoreNetConfig(hidden=[8]), ws.horizon, ws.target_channels, ws.covariate_channels,
                       task.schedule.to_dict(), rng)
    conds = conditioning_matrix(task.splits.test)[:6]
    return den, sn, conds


def test_single_particle_matches_ddpm_bitwise(models, task):
    den, sn, conds = models
    for seed in range(3):
        a = ddpm_sample(den, task.schedule, conds[seed], np.random.default_rng(seed))
        b, _ = semguide_sample(den, sn, task.schedule, conds[seed], 1, np.random.default_rng(seed))
        assert a.tobytes() == b.tobytes()
    fa = forecast_batch("ddpm", den, task.schedule, conds, 1, np.random.default_rng(4))
    fb = forecast_batch("semguide", den, task.schedule, conds, 1, np.random.default_rng(4), score_model=sn)
    fc = forecast_batch("baseline", den, task.schedule, conds, 1, np.random.default_rng(4))
    assert fa.tobytes() == fb.tobytes() == fc.tobytes()


def test_median_of_one_is_ddpm(models, task):
    den, _, conds = models
    a = ddpm_sample(den, task.schedule, conds[0], np.random.default_rng(3))
    b = median_forecast(den, task.schedule, conds[0], 1, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()


def test_constant_score_center_is_particle_mean(models, task):
    den, _, conds = models
    const = lambda s, c, t: np.full(len(s), 0.5)
    _, tr = semguide_sample(den, const, task.schedule, conds[1], 4, np.random.default_rng(2), trace=True)
    assert len(tr.steps) == task.schedule.num_steps
    for rec in tr.steps:
        np.testing.assert_allclose(rec.center, rec.particle_mean, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(rec.weights, 0.25)
        assert rec.ess[0] == pytest.approx(4.0, abs=1e-12)


def test_trace_simplex_and_determinism(models, task, tmp_path):
    den, sn, conds = models
    out1, tr1 = semguide_sample(den, sn, task.schedule, conds[2], 7, np.random.default_rng(5), trace=True, seed=5)
    out2, tr2 = semguide_sample(den, sn, task.schedule, conds[2], 7, np.random.default_rng(5), trace=True, seed=5)
    assert out1.tobytes() == out2.tobytes()
    assert [t.t for t in tr1.steps] == list(range(task.schedule.num_steps, 0, -1))
    for a, b in zip(tr1.steps, tr2.steps):
        assert a.weights.tobytes() == b.weights.tobytes()
        assert a.weights.min() >= 0 and abs(a.weights.sum() - 1.0) < 1e-9
        assert np.all((a.scores > 0) & (a.scores < 1))
    # the returned forecast is the last weighted center
    np.testing.assert_array_equal(out1, tr1.steps[-1].center[0])
    tr1.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,particle,score,weight,ess"
    assert len(lines) == 1 + 7 * task.schedule.num_steps


def test_resample_mode_runs(models, task):
    den, sn, conds = models
    a = forecast_batch("semguide", den, task.schedule, conds, 5, np.random.default_rng(1), score_model=sn,
                       resample=True)
    b = forecast_batch("semguide", den, task.schedule, conds, 5, np.random.default_rng(1), score_model=sn,
                       resample=True)
    assert a.shape == (len(conds), den.state_dim) and a.tobytes() == b.tobytes()


def test_sampler_errors(models, task):
    den, sn, conds = models
    with pytest.raises(ValueError):
        semguide_sample(den, sn, task.schedule, conds[0], 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        median_forecast(den, task.schedule, conds[0], 0, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        ddpm_sample(den, task.schedule, conds[0][:-1], np.random.default_rng(0))
    with pytest.raises(ShapeError):
        ddpm_sample(den, make_linear_schedule(20, 1e-3, 0.3), conds[0], np.random.default_rng(0))
    wrong = new_score_net(ScoreNetConfig(hidden=[4]), 12, 1, 5, task.schedule.to_dict(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        semguide_sample(den, wrong, task.schedule, conds[0], 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="valid methods: ddpm, baseline, semguide"):
        forecast_batch("mean", den, task.schedule, conds, 3, np.random.default_rng(0))


# ---------------------------------------------------------------- stubs and analytic oracles


def test_median_with_stubbed_sampler():
    vals = iter([[1.0], [5.0], [100.0]])
    assert median_forecast(None, None, None, 3, None, sample_fn=lambda r: next(vals)).tolist() == [5.0]
    vals = iter([[0.0], [4.0]])
    assert median_forecast(None, None, None, 2, None, sample_fn=lambda r: next(vals)).tolist() == [2.0]


def _stub_model(schedule, dim, cov_dim):
    return SimpleNamespace(schedule=schedule.to_dict(), state_dim=dim, cond_dim=cov_dim, horizon=dim,
                           covariate_channels=cov_dim // dim)


def test_single_step_zero_denoiser(monkeypatch):
    sched = make_linear_schedule(1, 0.3, 0.3)
    monkeypatch.setattr(sampler, "predict_noise", lambda m, x, c, t: np.zeros_like(x))
    model = _stub_model(sched, 2, 2)
    x_T = np.random.default_rng(9).standard_normal((1, 1, 2))[0, 0]
    out = ddpm_sample(model, sched, np.zeros(2), np.random.default_rng(9))
    np.testing.assert_allclose(out, x_T / np.sqrt(sched.alpha[0]), rtol=0, atol=1e-15)


def test_ddpm_mean_matches_gaussian_oracle(monkeypatch):
    # x0 | c ~ N(c, s^2 I): the exact noise predictor is linear in x_t
    sched = make_linear_schedule(200, 1e-4, 0.05)
    s2 = 0.25

    def oracle_eps(model, x, cond, t):
        ab = sched.alpha_bar[t - 1]
        return np.sqrt(1 - ab) * (x - np.sqrt(ab) * cond) / (ab * s2 + 1 - ab)

    monkeypatch.setattr(sampler, "predict_noise", oracle_eps)
    mu = np.array([1.0, -0.5, 2.0])
    runs = 500
    conds = np.tile(mu, (runs, 1))
    out = forecast_batch("ddpm", _stub_model(sched, 3, 3), sched, conds, 1, np.random.default_rng(0))
    se = out.std(axis=0, ddof=1) / np.sqrt(runs)
    assert np.all(np.abs(out.mean(axis=0) - mu) < 3 * se)


def test_semguide_picks_covariate_selected_mode(monkeypatch):
    # unconditional two-mode prior +-m; the covariate y in {+1, -1} names the mode,
    # the score is a logistic likelihood of y given the state's projection on m
    sched = make_linear_schedule(100, 1e-4, 0.1)
    m = np.array([1.0, 1.0, -1.0, 0.5])
    s = 0.2

    def mixture_eps(model, x, cond, t):
        ab = sched.alpha_bar[t - 1]
        var = ab * s * s + 1 - ab
        logit = 2 * np.sqrt(ab) * (x @ m) / var  # log N(x; +) - log N(x; -)
        r = 0.5 * (1 + np.tanh(logit / 2))
        mean_mu = (2 * r - 1)[:, None] * m  # responsibility-weighted component mean
        x0_hat = mean_mu + (np.sqrt(ab) * s * s / var) * (x - np.sqrt(ab) * mean_mu)
        return (x - np.sqrt(ab) * x0_hat) / np.sqrt(1 - ab)

    def likelihood(states, cov, t):
        proj = states @ m / (m @ m)
        return 1.0 / (1.0 + np.exp(-6.0 * cov[:, 0] * proj))

    monkeypatch.setattr(sampler, "predict_noise", mixture_eps)
    runs = 200
    y = np.where(np.arange(runs) % 2 == 0, 1.0, -1.0)
    conds = np.repeat(y[:, None], len(m), axis=1)
    model = _stub_model(sched, len(m), len(m))
    target = y[:, None] * m
    tol = 3 * s * np.sqrt(len(m))

    guided = forecast_batch("semguide", model, sched, conds, 10, np.random.default_rng(1), score_model=likelihood)
    hit = np.linalg.norm(guided - target, axis=1) < tol
    assert hit.mean() >= 0.95

    med = forecast_batch("baseline", model, sched, conds, 10, np.random.default_rng(1))
    med_hit = np.linalg.norm(med - target, axis=1) < tol
    # the unguided median does not know y and lands on either mode (or between them)
    assert med_hit.mean() < 0.7
