import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import MC_SEED, make_dataset
from medgmm import (
    Dataset,
    SimConfig,
    fit_outcome_regression,
    generate_dataset,
    regression_effects,
)
from medgmm.baseline import regression_bread, regression_estimating_functions
from medgmm.inference import jacobian_discrepancy, numeric_bread


def test_exact_coefficient_recovery():
    rng = np.random.default_rng(0)
    n = 100
    x = rng.standard_normal((n, 1))
    a = rng.integers(0, 2, n).astype(float)
    m = rng.standard_normal((n, 3)) + a[:, None]
    y = 1.3 + 2.5 * a + m @ [1.2, 0.8, 1.0] + 1.5 * x[:, 0]
    fit = fit_outcome_regression(Dataset(y=y, a=a, m=m, x=x))
    np.testing.assert_allclose(fit.outcome_coef, [1.3, 2.5, 1.2, 0.8, 1.0, 1.5], atol=1e-10)
    assert fit.theta0 == pytest.approx(1.3, abs=1e-10)
    np.testing.assert_allclose(fit.theta3, [1.5], atol=1e-10)


def test_zero_outcome():
    ds = make_dataset(1, n=50, k=2)
    fit = fit_outcome_regression(Dataset(y=np.zeros(50), a=ds.a, m=ds.m, x=ds.x))
    np.testing.assert_array_equal(fit.outcome_coef, 0.0)


def test_matches_normal_equations():
    ds = make_dataset(2, n=60, k=3, p=2)
    fit = fit_outcome_regression(ds)
    d = np.column_stack([np.ones(ds.n), ds.a, ds.m, ds.x])
    oracle = np.linalg.solve(d.T @ d, d.T @ ds.y)
    np.testing.assert_allclose(fit.outcome_coef, oracle, rtol=1e-10, atol=1e-12)


def test_zero_theta2_gives_zero_nie():
    ds = make_dataset(3, n=80, k=2)
    # outcome exactly linear in (1, A, X), so the fitted theta2 is zero
    y = 1 + 2 * ds.a + ds.x[:, 0]
    fit = fit_outcome_regression(Dataset(y=y, a=ds.a, m=ds.m, x=ds.x))
    assert regression_effects(fit).nie == pytest.approx(0.0, abs=1e-10)
    np.testing.assert_allclose(fit.theta2, 0.0, atol=1e-10)
    assert np.all(np.abs(fit.beta1) > 0.1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 3), p=st.integers(0, 3),
       n=st.integers(20, 200))
def test_cochran_identity(seed, k, p, n):
    ds = make_dataset(seed, n=n, k=k, p=p)
    rep = regression_effects(fit_outcome_regression(ds, check_jacobian=False))
    d = np.column_stack([np.ones(ds.n), ds.a, ds.x])
    total = np.linalg.lstsq(d, ds.y, rcond=None)[0][1]
    assert rep.nde + rep.nie == pytest.approx(total, abs=1e-10 * (1 + abs(total)))


def test_bread_matches_finite_differences():
    ds = make_dataset(4, n=100, k=2, p=2)
    fit = fit_outcome_regression(ds)
    num = numeric_bread(lambda v: regression_estimating_functions(ds, v).mean(axis=0),
                        fit.stacked.varphi)
    assert jacobian_discrepancy(regression_bread(ds), num) <= 1e-4


def test_estimating_functions_vanish_at_fit():
    ds = make_dataset(5, n=100, k=3)
    fit = fit_outcome_regression(ds)
    ef = regression_estimating_functions(ds, fit.stacked.varphi).mean(axis=0)
    assert np.max(np.abs(ef)) <= 1e-10


def test_consistent_without_confounding():
    ds = generate_dataset(SimConfig(n=20000, eta=0.0, delta=2.0, seed=4), 0)
    rep = regression_effects(fit_outcome_regression(ds))
    assert abs(rep.nde - 2.5) < 4 * rep.se_nde
    assert abs(rep.nie - 3.76) < 4 * rep.se_nie


@pytest.mark.slow
def test_regression_biased_under_confounding(mc_cache):
    result = mc_cache(SimConfig(n=800, eta=0.5, delta=2.0, reps=1000, seed=MC_SEED))
    row = result.row("NDE_reg")
    assert abs(row.abs_bias - 0.194) <= 0.03
    assert row.cov95 <= 0.55
