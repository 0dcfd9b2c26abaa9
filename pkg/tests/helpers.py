import numpy as np

from medgmm import Dataset
from medgmm.second_step import empirical_psi_mean


# Seed of the 1000-replicate Monte Carlo runs shared by several test modules.
MC_SEED = 2024


def make_dataset(seed, n=200, k=3, p=1, binary=True, hetero=2.0, confound=0.5):
    """Small random dataset with exposure-dependent mediator variance."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    u = rng.standard_normal(n)
    if binary:
        a = (rng.random(n) < 1 / (1 + np.exp(-(0.2 + 0.4 * x.sum(axis=1))))).astype(float)
        if a.min() == a.max():
            a[0] = 1 - a[0]
    else:
        a = 0.5 * x.sum(axis=1) + rng.standard_normal(n)
    beta = rng.uniform(0.5, 1.5, k)
    scale = np.sqrt(1 + hetero * np.abs(a))[:, None]
    m = (rng.uniform(-1, 1, k) + np.outer(a, beta) + x @ rng.uniform(-1, 1, (p, k))
         + confound * u[:, None] + scale * rng.standard_normal((n, k)))
    y = (1.0 + 2.0 * a + m @ rng.uniform(0.5, 1.5, k) + x @ rng.uniform(-1, 1, p)
         + confound * u + rng.standard_normal(n))
    return Dataset(y=y, a=a, m=m, x=x)


def assert_moment_zero(dataset, first, theta_fit):
    """Exactly identified moments are solved to machine precision."""
    c = theta_fit.system.c
    resid = np.max(np.abs(empirical_psi_mean(dataset, first, theta_fit.theta)))
    assert resid <= 1e-10 * (1 + np.max(np.abs(c))), resid
    return resid


def make_application_dataset(replicate, n=527, k=3, p=7):
    """Synthetic data shaped like a typical application (n=527, K=3, 7 covariates).

    Coefficients are fixed; ``replicate`` only changes the noise, so repeated
    calls give draws from one data-generating process.
    """
    coef = np.random.default_rng(527)
    beta, b0 = coef.uniform(0.5, 1.5, k), coef.uniform(-1, 1, k)
    bx, ty, tx = coef.uniform(-1, 1, (p, k)), coef.uniform(0.5, 1.5, k), coef.uniform(-1, 1, p)
    rng = np.random.default_rng(10_000 + replicate)
    x = rng.standard_normal((n, p))
    u = rng.standard_normal(n)
    a = (rng.random(n) < 1 / (1 + np.exp(-(0.2 + 0.4 * x.sum(axis=1))))).astype(float)
    m = (b0 + np.outer(a, beta) + x @ bx + 0.5 * u[:, None]
         + np.sqrt(1 + 2 * a)[:, None] * rng.standard_normal((n, k)))
    y = 1 + 2 * a + m @ ty + x @ tx + 0.5 * u + rng.standard_normal(n)
    return Dataset(y=y, a=a, m=m, x=x)
