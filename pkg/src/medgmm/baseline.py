"""Regression-based mediation estimator assuming no unmeasured confounding.

Outcome model ``E(Y | A, M, X) = theta0 + theta1 A + theta2' M + theta3' X``
and mediator models ``E(M_j | A, X) = beta0_j + beta1_j A + beta2_j' X``,
both by OLS. ``NDE = theta1`` and ``NIE = beta1' theta2``. Standard errors
come from the same stacked sandwich engine as the two-step estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from medgmm._linalg import ols
from medgmm.core import Dataset, Tolerances, build_design, covariate_design
from medgmm.first_step import fit_mediator_regressions
from medgmm.inference import (
    EffectReport,
    StackedFit,
    check_bread,
    effects_from_stacked,
    sandwich,
)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    outcome_coef: np.ndarray
    outcome_labels: tuple
    alpha: np.ndarray
    beta1: np.ndarray
    stacked: StackedFit

    @property
    def theta0(self) -> float:
        return float(self.outcome_coef[0])

    @property
    def theta1(self) -> float:
        return float(self.outcome_coef[1])

    @property
    def theta2(self) -> np.ndarray:
        return self.outcome_coef[2:2 + self.beta1.size]

    @property
    def theta3(self) -> np.ndarray:
        return self.outcome_coef[2 + self.beta1.size:]


def regression_layout(k: int, q: int) -> dict:
    d_out = 2 + k + (q - 1)
    a_end = k * q
    b_end = a_end + k
    return {
        "alpha": (0, a_end),
        "beta1": (a_end, b_end),
        "outcome": (b_end, b_end + d_out),
        "theta1": (b_end + 1, b_end + 2),
        "theta2": (b_end + 2, b_end + 2 + k),
    }


def regression_estimating_functions(dataset: Dataset, varphi: np.ndarray) -> np.ndarray:
    k = dataset.k
    xt = covariate_design(dataset)
    q = xt.shape[1]
    lay = regression_layout(k, q)
    alpha = varphi[slice(*lay["alpha"])].reshape(k, q)
    beta1 = varphi[slice(*lay["beta1"])]
    coef = varphi[slice(*lay["outcome"])]
    design = build_design(dataset, include_exposure=True, include_mediators=True).values
    resid = dataset.m - np.outer(dataset.a, beta1) - xt @ alpha.T
    out_resid = dataset.y - design @ coef
    s_alpha = (resid[:, :, None] * xt[:, None, :]).reshape(dataset.n, k * q)
    return np.hstack([s_alpha, resid * dataset.a[:, None], design * out_resid[:, None]])


def regression_bread(dataset: Dataset) -> np.ndarray:
    """Analytic Jacobian mean; block diagonal since the fits share no parameters."""
    n, k = dataset.n, dataset.k
    xt = covariate_design(dataset)
    q = xt.shape[1]
    lay = regression_layout(k, q)
    design = build_design(dataset, include_exposure=True, include_mediators=True).values
    d = lay["outcome"][1]
    J = np.zeros((d, d))
    a = dataset.a
    xtx = xt.T @ xt / n
    xta = xt.T @ a / n
    b0 = lay["beta1"][0]
    for j in range(k):
        aj = slice(j * q, (j + 1) * q)
        J[aj, aj] = -xtx
        J[aj, b0 + j] = -xta
        J[b0 + j, aj] = -xta
        J[b0 + j, b0 + j] = -(a @ a) / n
    o = slice(*lay["outcome"])
    J[o, o] = -design.T @ design / n
    return J


def fit_outcome_regression(dataset: Dataset, tol: Tolerances | None = None,
                           small_sample: bool = False,
                           check_jacobian: bool = True) -> RegressionFit:
    """OLS outcome and mediator fits plus their stacked sandwich covariance."""
    tol = tol or Tolerances()
    design = build_design(dataset, include_exposure=True, include_mediators=True)
    coef = ols(design.values, dataset.y, labels=design.labels)
    alpha, beta1, _ = fit_mediator_regressions(dataset)
    varphi = np.concatenate([alpha.ravel(), beta1, coef])
    bread = regression_bread(dataset)
    if check_jacobian:
        check_bread(lambda v: regression_estimating_functions(dataset, v).mean(axis=0),
                    varphi, bread, tol)
    vcov, meat = sandwich(regression_estimating_functions(dataset, varphi), bread, small_sample)
    stacked = StackedFit(varphi=varphi, vcov=vcov,
                         layout=regression_layout(dataset.k, 1 + dataset.p),
                         bread=bread, meat=meat, n=dataset.n)
    return RegressionFit(outcome_coef=coef, outcome_labels=design.labels,
                         alpha=alpha, beta1=beta1, stacked=stacked)


def regression_effects(fit: RegressionFit, mediator_names=None) -> EffectReport:
    return effects_from_stacked(fit.stacked, "regression", mediator_names)


def regression_point(dataset: Dataset, tol: Tolerances | None = None) -> np.ndarray:
    design = build_design(dataset, include_exposure=True, include_mediators=True)
    coef = ols(design.values, dataset.y, labels=design.labels)
    _, beta1, _ = fit_mediator_regressions(dataset)
    prods = beta1 * coef[2:2 + dataset.k]
    return np.concatenate([[coef[1], prods.sum()], prods])
