import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from helpers import make_dataset
from medgmm import (
    Dataset,
    RankDeficiencyError,
    SeparationError,
    SimConfig,
    fit_exposure_mean,
    fit_first_step,
    fit_mediator_regressions,
    fit_propensity,
    generate_dataset,
)
from medgmm.core import covariate_design
from medgmm.inference import gmm_estimating_functions, pack_gmm


def _coordinate_search_logit(xt, a, sweeps=200):
    """Independent MLE: cyclic 1-d Brent searches on the log-likelihood."""
    def nll(g):
        eta = xt @ g
        return -np.sum(a * eta - np.logaddexp(0, eta))

    g = np.zeros(xt.shape[1])
    for _ in range(sweeps):
        old = g.copy()
        for i in range(g.size):
            def f(v, i=i):
                h = g.copy()
                h[i] = v
                return nll(h)
            g[i] = minimize_scalar(f, bracket=(g[i] - 1, g[i] + 1),
                                   options={"xtol": 1e-14}).x
        if np.max(np.abs(g - old)) < 1e-13:
            break
    return g


def test_intercept_only_propensity():
    a = np.array([1.0] * 25 + [0.0] * 75)
    ds = Dataset(y=np.zeros(100), a=a, m=np.random.default_rng(0).standard_normal((100, 1)),
                 x=np.zeros((100, 0)))
    gamma, pi = fit_propensity(ds)
    assert gamma[0] == pytest.approx(np.log(1 / 3), abs=1e-10)
    np.testing.assert_allclose(pi, 0.25, atol=1e-10)


def test_separation_detected():
    x = np.linspace(-2, 2, 40)
    a = (x > 0).astype(float)
    ds = Dataset(y=np.zeros(40), a=a, m=np.ones((40, 1)) + x[:, None] ** 2, x=x[:, None])
    with pytest.raises(SeparationError):
        fit_propensity(ds)


def test_propensity_matches_coordinate_search_oracle():
    ds = generate_dataset(SimConfig(n=200, eta=0.5, delta=2.0, seed=11), 0)
    gamma, _ = fit_propensity(ds)
    oracle = _coordinate_search_logit(covariate_design(ds), ds.a)
    np.testing.assert_allclose(gamma, oracle, atol=1e-6)
    # sampling error around the true (0.8, 1.2) at n = 200
    assert np.all(np.abs(gamma - [0.8, 1.2]) < 0.7)


def test_propensity_score_equations():
    ds = make_dataset(3, n=300, p=2)
    gamma, pi = fit_propensity(ds)
    score = covariate_design(ds).T @ (ds.a - pi) / ds.n
    assert np.max(np.abs(score)) <= 1e-8
    assert np.all((pi > 0) & (pi < 1))


def test_continuous_exposure_rejected_by_logistic():
    ds = make_dataset(0, binary=False)
    with pytest.raises(Exception, match="fit_exposure_mean"):
        fit_propensity(ds)


def test_exposure_mean_exact_fit():
    x = np.linspace(-1, 1, 30)
    ds = Dataset(y=np.zeros(30), a=2 * x, m=np.ones((30, 1)), x=x[:, None])
    gamma, pi = fit_exposure_mean(ds)
    np.testing.assert_allclose(gamma, [0, 2], atol=1e-12)
    np.testing.assert_allclose(ds.a - pi, 0, atol=1e-12)


def test_exposure_mean_intercept_only():
    a = np.random.default_rng(1).standard_normal(20)
    ds = Dataset(y=np.zeros(20), a=a, m=np.ones((20, 1)), x=np.zeros((20, 0)))
    _, pi = fit_exposure_mean(ds)
    np.testing.assert_allclose(pi, a.mean(), rtol=1e-12)


def test_exposure_mean_matches_normal_equations():
    ds = make_dataset(5, n=50, p=2, binary=False)
    gamma, _ = fit_exposure_mean(ds)
    xt = covariate_design(ds)
    oracle = np.linalg.solve(xt.T @ xt, xt.T @ ds.a)
    np.testing.assert_allclose(gamma, oracle, rtol=1e-10, atol=1e-12)


def test_mediator_exact_fit():
    a = np.array([0.0, 1.0] * 10)
    ds = Dataset(y=np.zeros(20), a=a, m=(1.5 * a + 1.2)[:, None], x=np.zeros((20, 0)))
    alpha, beta1, resid = fit_mediator_regressions(ds)
    assert beta1[0] == pytest.approx(1.5, abs=1e-12)
    assert alpha[0, 0] == pytest.approx(1.2, abs=1e-12)
    np.testing.assert_allclose(resid, 0, atol=1e-12)


def test_mediator_coefficients_near_truth():
    ds = generate_dataset(SimConfig(n=800, eta=0.0, delta=2.0, seed=3), 0)
    _, beta1, _ = fit_mediator_regressions(ds)
    np.testing.assert_allclose(beta1, [1.5, 1.2, 1.0], atol=0.4)


def test_mediator_matches_normal_equations():
    ds = make_dataset(8, n=40, k=3, p=2)
    alpha, beta1, _ = fit_mediator_regressions(ds)
    d = np.column_stack([np.ones(ds.n), ds.a, ds.x])
    for j in range(ds.k):
        oracle = np.linalg.solve(d.T @ d, d.T @ ds.m[:, j])
        np.testing.assert_allclose(beta1[j], oracle[1], rtol=1e-10)
        np.testing.assert_allclose(alpha[j], np.r_[oracle[0], oracle[2:]], rtol=1e-10, atol=1e-12)


def test_rank_deficient_design():
    x = np.random.default_rng(0).standard_normal(30)
    a = (x > 0).astype(float)
    ds = Dataset(y=np.zeros(30), a=a, m=np.ones((30, 1)) + x[:, None], x=a[:, None])
    with pytest.raises(RankDeficiencyError):
        fit_mediator_regressions(ds)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 3), p=st.integers(0, 2))
def test_score_zero_and_orthogonality(seed, k, p):
    ds = make_dataset(seed, n=120, k=k, p=p)
    first = fit_first_step(ds)
    d = np.column_stack([np.ones(ds.n), ds.a, ds.x])
    assert np.max(np.abs(d.T @ first.mediator_residuals)) / ds.n <= 1e-8
    # first-step blocks of the stacked estimating function vanish at the fit
    q = 1 + p
    dim = q + k * q + k
    theta_dummy = type("T", (), {"theta2": np.zeros(k), "theta1": 0.0})
    phi = pack_gmm(first, theta_dummy)
    mean = gmm_estimating_functions(ds, phi).mean(axis=0)[:dim]
    assert np.max(np.abs(mean)) <= 1e-8


def test_covariate_scaling_equivariance():
    ds = make_dataset(21, n=150, k=2, p=2)
    scaled = Dataset(y=ds.y, a=ds.a, m=ds.m, x=ds.x * np.array([3.0, 1.0]))
    f0, f1 = fit_first_step(ds), fit_first_step(scaled)
    np.testing.assert_allclose(f1.alpha[:, 1], f0.alpha[:, 1] / 3.0, rtol=1e-9)
    np.testing.assert_allclose(f1.beta1, f0.beta1, rtol=1e-9)
    np.testing.assert_allclose(f1.mediator_residuals, f0.mediator_residuals, atol=1e-9)
    np.testing.assert_allclose(f1.pi_hat, f0.pi_hat, atol=1e-8)
