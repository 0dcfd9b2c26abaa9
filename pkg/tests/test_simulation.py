import json

import numpy as np
import pytest
from scipy import integrate, special, stats

from helpers import MC_SEED
from medgmm import SimConfig, generate_dataset, run_monte_carlo
from medgmm.inference import gmm_point
from medgmm.simulation import (
    NIE_TRUE,
    MetricRow,
    format_table,
    format_value,
    summarize,
    toeplitz_sigma,
)

GRID = [(0.0, 2.0), (0.0, 5.0), (0.5, 2.0), (0.5, 5.0)]


def test_toeplitz_examples():
    np.testing.assert_array_equal(toeplitz_sigma(2.0, 1, 3),
                                  [[3, 1.5, 0.75], [1.5, 3, 1.5], [0.75, 1.5, 3]])
    np.testing.assert_array_equal(toeplitz_sigma(7.0, 0, 2), [[1, 0.5], [0.5, 1]])
    chol = np.linalg.cholesky(toeplitz_sigma(5.0, 1, 3))
    np.testing.assert_allclose(chol @ chol.T, toeplitz_sigma(5.0, 1, 3), atol=1e-14)


def test_toeplitz_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        toeplitz_sigma(-1.0, 1)


def test_true_indirect_effect():
    assert NIE_TRUE == pytest.approx(1.5 * 1.2 + 1.2 * 0.8 + 1.0 * 1.0, abs=1e-12)


def test_no_confounding_severs_latent():
    cfg = SimConfig(n=5000, eta=0.0, delta=2.0, seed=5)
    ds, u = generate_dataset(cfg, 0, return_latent=True)
    d = np.column_stack([np.ones(ds.n), ds.a, ds.m, ds.x])
    resid = ds.y - d @ np.linalg.lstsq(d, ds.y, rcond=None)[0]
    assert abs(np.corrcoef(u, resid)[0, 1]) < 0.05


def test_exposure_mean_matches_quadrature():
    ds = generate_dataset(SimConfig(n=100_000, eta=0.5, delta=2.0, seed=9), 0)
    expected = integrate.quad(lambda x: special.expit(0.8 + 1.2 * x) * stats.norm.pdf(x),
                              -np.inf, np.inf)[0]
    assert abs(ds.a.mean() - expected) < 0.005


def test_mediator_variance_ratio():
    ds = generate_dataset(SimConfig(n=100_000, eta=0.0, delta=5.0, seed=10), 0)
    d = np.column_stack([np.ones(ds.n), ds.a, ds.x])
    resid = ds.m[:, 0] - d @ np.linalg.lstsq(d, ds.m[:, 0], rcond=None)[0]
    ratio = resid[ds.a == 1].var() / resid[ds.a == 0].var()
    assert ratio == pytest.approx(6.0, rel=0.05)


def test_generation_is_deterministic():
    cfg = SimConfig(n=100, seed=3)
    assert generate_dataset(cfg, 4).same_values(generate_dataset(cfg, 4))
    assert not generate_dataset(cfg, 4).same_values(generate_dataset(cfg, 5))


def test_config_validation():
    for bad in ({"n": 0}, {"reps": 0}, {"seed": -1}, {"delta": -1.0}):
        with pytest.raises(ValueError):
            SimConfig(**bad)


def test_single_replicate():
    result = run_monte_carlo(SimConfig(n=400, reps=1, seed=2))
    est = result.estimates[0]
    for i, row in enumerate(result.rows):
        truth = 2.5 if row.estimator.startswith("NDE") else NIE_TRUE
        assert row.mc_sd == 0.0
        assert row.abs_bias == pytest.approx(abs(est[i, 0] - truth), abs=1e-15)
        assert row.mean_se == pytest.approx(est[i, 1], rel=1e-15)


def test_summarize_skips_failed_replicates():
    est = np.full((3, 4, 3), np.nan)
    est[0] = [[2.5, 0.1, 1]] * 2 + [[3.0, 0.1, 0]] * 2
    est[2] = [[2.7, 0.1, 1]] * 4
    rows = summarize(est)
    assert rows[0].n_used == 2
    assert rows[0].abs_bias == pytest.approx(0.1)
    assert 0 <= rows[2].cov95 <= 1


def test_run_is_thread_independent():
    cfg = SimConfig(n=200, reps=6, seed=11, eta=0.5)
    a, b = run_monte_carlo(cfg), run_monte_carlo(cfg, threads=3)
    assert np.array_equal(a.estimates, b.estimates, equal_nan=True)
    assert a.rows == b.rows


def test_format_value_rules():
    assert format_value(0.0004) == "0.000"
    assert format_value(0.9505) == "0.950"
    assert format_value(0.0125) == "0.012"
    assert format_value(0.116) == "0.116"


def test_format_table():
    rows = [MetricRow("NDE", 0.0004, 0.1, 0.2, 0.9505, 10)]
    text, payload = format_table(rows)
    assert "0.000" in text and "0.950" in text
    assert json.loads(json.dumps(payload))["rows"][0]["abs_bias"] == 0.0004
    with pytest.raises(ValueError):
        format_table([])


@pytest.mark.slow
@pytest.mark.parametrize("eta,delta", GRID)
def test_coverage_calibration(mc_cache, eta, delta):
    result = mc_cache(SimConfig(n=800, eta=eta, delta=delta, reps=1000, seed=MC_SEED))
    assert result.reliable
    for name in ("NDE", "NIE"):
        assert 0.93 <= result.row(name).cov95 <= 0.97, (name, result.row(name))


@pytest.mark.slow
def test_regression_more_biased_under_confounding(mc_cache):
    for delta in (2.0, 5.0):
        result = mc_cache(SimConfig(n=800, eta=0.5, delta=delta, reps=1000, seed=MC_SEED))
        assert result.row("NIE_reg").abs_bias > result.row("NIE").abs_bias


@pytest.mark.slow
@pytest.mark.parametrize("eta,delta", GRID)
def test_truth_recovery_as_n_grows(eta, delta):
    bias = {}
    for n in (800, 3200, 12800):
        cfg = SimConfig(n=n, eta=eta, delta=delta, reps=200, seed=MC_SEED)
        est = np.array([gmm_point(generate_dataset(cfg, r))[:2] for r in range(cfg.reps)])
        bias[n] = np.abs(est.mean(axis=0) - [2.5, NIE_TRUE])
    assert np.all(bias[12800] < 0.05)
    # bias shrinks from the smallest to the largest n, up to Monte Carlo noise
    assert np.all(bias[12800] <= bias[800] + 0.01)
