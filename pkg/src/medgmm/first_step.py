"""First step: propensity model and per-mediator linear regressions.

The propensity score is a logistic regression of A on (1, X) for binary
exposures, or a linear mean model for continuous ones. Each mediator is
regressed on (1, A, X) by OLS; the residuals feed the second step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from medgmm._linalg import expit, ols
from medgmm.core import Dataset, Tolerances, build_design, covariate_design
from medgmm.errors import ConvergenceError, DataError, SeparationError

_MAX_HALVINGS = 30


@dataclass(frozen=True, eq=False)
class FirstStepFit:
    gamma: np.ndarray
    alpha: np.ndarray
    beta1: np.ndarray
    pi_hat: np.ndarray
    mediator_residuals: np.ndarray
    exposure_model: str = "logistic"

    @property
    def k(self) -> int:
        return self.beta1.shape[0]

    @property
    def pi_slope(self) -> np.ndarray:
        """d pi / d(linear predictor) at each row."""
        if self.exposure_model == "logistic":
            return self.pi_hat * (1.0 - self.pi_hat)
        return np.ones_like(self.pi_hat)

    def fitted_mediator_means(self, dataset: Dataset) -> np.ndarray:
        """G_j(X; alpha_j) for every row, shape (n, K)."""
        return covariate_design(dataset) @ self.alpha.T

    def to_dict(self, dataset: Dataset | None = None) -> dict:
        cov_labels = ["(intercept)"] + list(dataset.covariate_names if dataset else
                                            [f"X{j + 1}" for j in range(self.gamma.size - 1)])
        med_labels = list(dataset.mediator_names if dataset else
                          [f"M{j + 1}" for j in range(self.k)])
        return {
            "exposure_model": self.exposure_model,
            "gamma": dict(zip(cov_labels, self.gamma.tolist())),
            "beta1": dict(zip(med_labels, self.beta1.tolist())),
            "alpha": {m: dict(zip(cov_labels, row.tolist()))
                      for m, row in zip(med_labels, self.alpha)},
        }


def _log_likelihood(eta, a):
    return float(np.sum(a * eta - np.logaddexp(0.0, eta)))


def fit_propensity(dataset: Dataset, tol: Tolerances | None = None):
    """Logistic maximum likelihood for P(A = 1 | X) by IRLS with step-halving.

    Returns ``(gamma, pi_hat)``; ``gamma`` is intercept first. Convergence
    requires the mean score to be within ``tol.tol_score`` of zero and the
    Newton step to have collapsed, so that separated data (where the score
    decays while coefficients keep growing) is not mistaken for a solution.
    """
    tol = tol or Tolerances()
    if not dataset.exposure_binary:
        raise DataError("fit_propensity needs a {0,1} exposure; use fit_exposure_mean "
                        "for continuous exposures")
    design = covariate_design(dataset)
    a = dataset.a
    ols(design, a, labels=build_design(dataset).labels)  # rank check only
    gamma = np.zeros(design.shape[1])
    eta = design @ gamma
    ll = _log_likelihood(eta, a)
    for _ in range(tol.max_iter):
        pi = expit(eta)
        w = pi * (1.0 - pi)
        score = design.T @ (a - pi) / dataset.n
        hess = (design * w[:, None]).T @ design / dataset.n
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            raise SeparationError("logistic information matrix became singular; "
                                  "the exposure is (quasi-)separated by the covariates") from None
        scale = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = gamma + scale * step
            cand_eta = design @ cand
            cand_ll = _log_likelihood(cand_eta, a)
            if cand_ll >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
        gamma, eta, ll = cand, cand_eta, cand_ll
        pi = expit(eta)
        score = design.T @ (a - pi) / dataset.n
        max_score = float(np.max(np.abs(score)))
        if np.linalg.norm(gamma) > tol.separation_norm and max_score > 0:
            raise SeparationError(
                f"logistic coefficients diverged (norm {np.linalg.norm(gamma):.3g}); "
                "the exposure is (quasi-)separated by the covariates")
        if np.any(pi <= 0.0) or np.any(pi >= 1.0):
            raise SeparationError("fitted propensities reached 0 or 1; "
                                  "the exposure is (quasi-)separated by the covariates")
        if max_score <= tol.tol_score and np.max(np.abs(scale * step)) <= 1e-6 * (1 + np.max(np.abs(gamma))):
            return gamma, pi
    if np.min(pi) < 1e-10 or np.max(pi) > 1 - 1e-10:
        raise SeparationError("propensities saturate at 0 or 1 without converging; "
                              "the exposure is (quasi-)separated by the covariates")
    raise ConvergenceError(f"logistic fit did not converge in {tol.max_iter} iterations "
                           f"(max |score| = {max_score:.3g})")


def fit_exposure_mean(dataset: Dataset, tol: Tolerances | None = None):
    """Linear model E(A | X) = gamma'(1, X) for a continuous exposure."""
    design = covariate_design(dataset)
    gamma = ols(design, dataset.a, labels=build_design(dataset).labels)
    return gamma, design @ gamma


def fit_mediator_regressions(dataset: Dataset):
    """OLS of every mediator on (1, A, X).

    Returns
    -------
    alpha : (K, 1 + p) array
        Intercept and covariate coefficients per mediator.
    beta1 : (K,) array
        Exposure coefficient per mediator.
    residuals : (n, K) array
    """
    design = build_design(dataset, include_exposure=True)
    coef = ols(design.values, dataset.m, labels=design.labels)
    beta1 = coef[1].copy()
    alpha = np.vstack([coef[:1], coef[2:]]).T.copy()
    residuals = dataset.m - design.values @ coef
    return alpha, beta1, residuals


def fit_first_step(dataset: Dataset, tol: Tolerances | None = None) -> FirstStepFit:
    """Joint first step: propensity (or exposure mean) plus mediator fits."""
    tol = tol or Tolerances()
    if dataset.exposure_binary:
        gamma, pi_hat = fit_propensity(dataset, tol)
        model = "logistic"
    else:
        gamma, pi_hat = fit_exposure_mean(dataset, tol)
        model = "linear"
    alpha, beta1, resid = fit_mediator_regressions(dataset)
    return FirstStepFit(gamma=gamma, alpha=alpha, beta1=beta1, pi_hat=pi_hat,
                        mediator_residuals=resid, exposure_model=model)
