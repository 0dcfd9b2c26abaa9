"""Inference for the two-step estimator.

The first-step estimating functions and the G-estimation moments are
stacked into one M-estimation problem in

    phi = (gamma, alpha_1..alpha_K, beta1, theta2, theta1)

whose sandwich covariance propagates first-step uncertainty. Effects are
``NDE = theta1`` and ``NIE = beta1' theta2``; their standard errors come
from the delta method. A nonparametric bootstrap is the alternative.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from medgmm._linalg import expit
from medgmm.core import Dataset, ModelSpec, Tolerances, covariate_design
from medgmm.errors import EstimationError, IdentificationError, MedGMMError
from medgmm.first_step import FirstStepFit, fit_first_step
from medgmm.second_step import ThetaFit, assemble_moment_system, solve_theta

Z95 = 1.96
MAX_BOOTSTRAP_FAILURE = 0.10


@dataclass(frozen=True, eq=False)
class StackedFit:
    """Stacked parameter vector with its estimated finite-sample covariance.

    ``layout`` maps block names to ``(start, stop)`` index ranges of
    ``varphi``; ``theta1``, ``theta2`` and ``beta1`` are always present.
    """

    varphi: np.ndarray
    vcov: np.ndarray
    layout: dict
    bread: np.ndarray
    meat: np.ndarray
    n: int

    def block(self, name: str) -> slice:
        start, stop = self.layout[name]
        return slice(start, stop)

    def cov(self, row: str, col: str | None = None) -> np.ndarray:
        return self.vcov[self.block(row), self.block(col or row)]


@dataclass
class EffectReport:
    method: str
    se_method: str
    nde: float
    nie: float
    se_nde: float
    se_nie: float
    ci_nde: tuple
    ci_nie: tuple
    per_mediator: list = field(default_factory=list)
    n: int = 0
    ci_type: str = "wald"
    bootstrap: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "se_method": self.se_method,
            "ci_type": self.ci_type,
            "n": self.n,
            "nde": {"estimate": self.nde, "se": self.se_nde, "ci": list(self.ci_nde)},
            "nie": {"estimate": self.nie, "se": self.se_nie, "ci": list(self.ci_nie)},
            "per_mediator": self.per_mediator,
        }
        if self.bootstrap is not None:
            out["bootstrap"] = self.bootstrap
        return out


def wald_interval(estimate: float, se: float) -> tuple:
    half = Z95 * se
    return (estimate - half, estimate + half)


# ---------------------------------------------------------------------------
# Generic stacked M-estimation pieces, shared with the baseline estimator.


def sandwich(estfun: np.ndarray, bread: np.ndarray, small_sample: bool = False):
    """``bread^-1 meat bread^-T / n`` from per-row estimating functions."""
    n, d = estfun.shape
    meat = estfun.T @ estfun / n
    try:
        inv_bread = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise EstimationError("stacked bread matrix is singular") from None
    vcov = inv_bread @ meat @ inv_bread.T / n
    if small_sample:
        if n <= d:
            raise EstimationError(f"small-sample correction needs n > {d}")
        vcov *= n / (n - d)
    vcov = 0.5 * (vcov + vcov.T)
    return vcov, meat


def numeric_bread(mean_fn: Callable[[np.ndarray], np.ndarray], varphi: np.ndarray,
                  step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``varphi -> E_n[Phi(varphi)]``."""
    d = varphi.size
    jac = np.empty((mean_fn(varphi).size, d))
    for i in range(d):
        h = step * max(1.0, abs(varphi[i]))
        up = varphi.copy()
        dn = varphi.copy()
        up[i] += h
        dn[i] -= h
        jac[:, i] = (mean_fn(up) - mean_fn(dn)) / (2 * h)
    return jac


def jacobian_discrepancy(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst column-wise relative difference between two Jacobians."""
    worst = 0.0
    for i in range(analytic.shape[1]):
        scale = np.max(np.abs(analytic[:, i]))
        diff = np.max(np.abs(analytic[:, i] - numeric[:, i]))
        if scale > 0:
            worst = max(worst, diff / scale)
        else:
            worst = max(worst, diff)
    return float(worst)


def check_bread(mean_fn, varphi, bread, tol: Tolerances) -> float:
    numeric = numeric_bread(mean_fn, varphi, tol.jacobian_step)
    gap = jacobian_discrepancy(bread, numeric)
    if gap > tol.jacobian_rtol:
        raise EstimationError(f"analytic bread disagrees with finite differences "
                              f"(relative gap {gap:.3g})")
    return gap


def effects_from_stacked(stacked: StackedFit, method: str,
                         mediator_names=None) -> EffectReport:
    """NDE/NIE with delta-method standard errors from a stacked fit."""
    phi = stacked.varphi
    beta1 = phi[stacked.block("beta1")]
    theta2 = phi[stacked.block("theta2")]
    i_t1 = stacked.layout["theta1"][0]
    nde = float(phi[i_t1])
    nie = float(beta1 @ theta2)
    var_nde = float(stacked.vcov[i_t1, i_t1])

    grad = np.zeros(phi.size)
    grad[stacked.block("beta1")] = theta2
    grad[stacked.block("theta2")] = beta1
    var_nie = float(grad @ stacked.vcov @ grad)
    if var_nde < 0 or var_nie < 0:
        raise EstimationError("negative variance from the delta method")

    k = beta1.size
    names = list(mediator_names or [f"M{j + 1}" for j in range(k)])
    per_mediator = []
    b0 = stacked.layout["beta1"][0]
    t0 = stacked.layout["theta2"][0]
    for j in range(k):
        g = np.zeros(phi.size)
        g[b0 + j] = theta2[j]
        g[t0 + j] = beta1[j]
        v = float(g @ stacked.vcov @ g)
        if v < 0:
            raise EstimationError("negative variance from the delta method")
        prod = float(beta1[j] * theta2[j])
        se = float(np.sqrt(v))
        per_mediator.append({"mediator": names[j], "beta1": float(beta1[j]),
                             "theta2": float(theta2[j]), "product": prod, "se": se,
                             "ci": list(wald_interval(prod, se))})
    se_nde, se_nie = float(np.sqrt(var_nde)), float(np.sqrt(var_nie))
    return EffectReport(method=method, se_method="sandwich", nde=nde, nie=nie,
                        se_nde=se_nde, se_nie=se_nie,
                        ci_nde=wald_interval(nde, se_nde), ci_nie=wald_interval(nie, se_nie),
                        per_mediator=per_mediator, n=stacked.n)


# ---------------------------------------------------------------------------
# The two-step estimator.


def gmm_layout(k: int, q: int) -> dict:
    sizes = [("gamma", q), ("alpha", k * q), ("beta1", k), ("theta2", k), ("theta1", 1)]
    layout, start = {}, 0
    for name, size in sizes:
        layout[name] = (start, start + size)
        start += size
    return layout


def pack_gmm(first: FirstStepFit, theta: ThetaFit) -> np.ndarray:
    return np.concatenate([first.gamma, first.alpha.ravel(), first.beta1,
                           theta.theta2, [theta.theta1]])


def _unpack(varphi, layout, k, q):
    def get(name):
        s, e = layout[name]
        return varphi[s:e]
    return (get("gamma"), get("alpha").reshape(k, q), get("beta1"),
            get("theta2"), get("theta1")[0])


def gmm_estimating_functions(dataset: Dataset, varphi: np.ndarray,
                             exposure_model: str = "logistic") -> np.ndarray:
    """Per-row stacked estimating functions Phi(O_i; varphi), shape (n, d)."""
    k = dataset.k
    xt = covariate_design(dataset)
    q = xt.shape[1]
    layout = gmm_layout(k, q)
    gamma, alpha, beta1, theta2, theta1 = _unpack(varphi, layout, k, q)
    a, y, m = dataset.a, dataset.y, dataset.m
    eta = xt @ gamma
    pi = expit(eta) if exposure_model == "logistic" else eta
    e = a - pi
    resid = m - np.outer(a, beta1) - xt @ alpha.T
    outcome_part = y - m @ theta2
    s_alpha = (resid[:, :, None] * xt[:, None, :]).reshape(dataset.n, k * q)
    return np.hstack([
        xt * e[:, None],
        s_alpha,
        resid * a[:, None],
        resid * (e * outcome_part)[:, None],
        (e * (outcome_part - theta1 * a))[:, None],
    ])


def gmm_bread(dataset: Dataset, varphi: np.ndarray,
              exposure_model: str = "logistic") -> np.ndarray:
    """Analytic ``E_n[dPhi/dvarphi]``."""
    n, k = dataset.n, dataset.k
    xt = covariate_design(dataset)
    q = xt.shape[1]
    layout = gmm_layout(k, q)
    gamma, alpha, beta1, theta2, theta1 = _unpack(varphi, layout, k, q)
    a, y, m = dataset.a, dataset.y, dataset.m
    eta = xt @ gamma
    if exposure_model == "logistic":
        pi = expit(eta)
        slope = pi * (1 - pi)
    else:
        pi = eta
        slope = np.ones(n)
    e = a - pi
    resid = m - np.outer(a, beta1) - xt @ alpha.T
    outcome_part = y - m @ theta2
    d = layout["theta1"][1]
    J = np.zeros((d, d))
    g0 = layout["gamma"][0]
    a0 = layout["alpha"][0]
    b0 = layout["beta1"][0]
    t0 = layout["theta2"][0]
    t1 = layout["theta1"][0]
    gs = slice(g0, g0 + q)

    J[gs, gs] = -(xt * slope[:, None]).T @ xt / n
    xtx = xt.T @ xt / n
    xta = xt.T @ a / n
    aa = a @ a / n
    for j in range(k):
        aj = slice(a0 + j * q, a0 + (j + 1) * q)
        J[aj, aj] = -xtx
        J[aj, b0 + j] = -xta
        J[b0 + j, aj] = -xta
        J[b0 + j, b0 + j] = -aa

    eo = e * outcome_part
    for j in range(k):
        row = t0 + j
        J[row, gs] = -(slope * resid[:, j] * outcome_part) @ xt / n
        J[row, a0 + j * q:a0 + (j + 1) * q] = -eo @ xt / n
        J[row, b0 + j] = -eo @ a / n
        J[row, t0:t0 + k] = -(e * resid[:, j]) @ m / n
    J[t1, gs] = -(slope * (outcome_part - theta1 * a)) @ xt / n
    J[t1, t0:t0 + k] = -e @ m / n
    J[t1, t1] = -e @ a / n
    return J


def stacked_sandwich(dataset: Dataset, first: FirstStepFit, theta: ThetaFit,
                     tol: Tolerances | None = None, small_sample: bool = False,
                     check_jacobian: bool = True) -> StackedFit:
    """Sandwich covariance of all first- and second-step parameters.

    The analytic bread is checked against central finite differences of the
    stacked moment mean on every call unless ``check_jacobian`` is False.
    """
    tol = tol or Tolerances()
    varphi = pack_gmm(first, theta)
    model = first.exposure_model
    bread = gmm_bread(dataset, varphi, model)
    if check_jacobian:
        check_bread(lambda v: gmm_estimating_functions(dataset, v, model).mean(axis=0),
                    varphi, bread, tol)
    estfun = gmm_estimating_functions(dataset, varphi, model)
    layout = gmm_layout(dataset.k, 1 + dataset.p)
    try:
        vcov, meat = sandwich(estfun, bread, small_sample)
    except EstimationError:
        for name, (s, e) in layout.items():
            blk = bread[s:e, s:e]
            if np.linalg.matrix_rank(blk) < blk.shape[0]:
                raise EstimationError(f"stacked bread is singular in block {name!r}") from None
        raise
    return StackedFit(varphi=varphi, vcov=vcov, layout=layout, bread=bread, meat=meat,
                      n=dataset.n)


def delta_effects(first: FirstStepFit, theta: ThetaFit, stacked: StackedFit,
                  mediator_names=None) -> EffectReport:
    """Point effects from the fits, standard errors from ``stacked``."""
    report = effects_from_stacked(stacked, "gmm", mediator_names)
    # point estimates straight from the fits (identical to the packed values)
    report.nde = float(theta.theta1)
    report.nie = float(first.beta1 @ theta.theta2)
    return report


def fit_gmm(dataset: Dataset, tol: Tolerances | None = None):
    """Both estimation steps. Returns ``(first, theta_fit)``.

    An :class:`IdentificationError` raised by the solve carries the
    identification diagnostics for the data.
    """
    tol = tol or Tolerances()
    first = fit_first_step(dataset, tol)
    system = assemble_moment_system(dataset, first)
    try:
        theta = solve_theta(system, tol)
    except IdentificationError as exc:
        from medgmm.diagnostics import decompose_rank_condition

        exc.report = decompose_rank_condition(dataset, first, system, tol)
        raise
    return first, theta


def gmm_point(dataset: Dataset, tol: Tolerances | None = None) -> np.ndarray:
    """``(NDE, NIE, per-mediator products...)`` without inference."""
    first, theta = fit_gmm(dataset, tol)
    prods = first.beta1 * theta.theta2
    return np.concatenate([[theta.theta1, prods.sum()], prods])


def _point_fn(method: str):
    if method == "gmm":
        return gmm_point
    from medgmm.baseline import regression_point

    return regression_point


def _bootstrap_one(args):
    dataset, method, seed, r, tol = args
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
    rows = rng.integers(0, dataset.n, size=dataset.n)
    try:
        return _point_fn(method)(dataset.take(rows), tol)
    except (MedGMMError, np.linalg.LinAlgError, FloatingPointError):
        return None


def bootstrap_replicates(dataset: Dataset, method: str, reps: int, seed: int,
                         tol: Tolerances | None = None, threads: int = 1):
    """Replicate point estimates, row r from the stream keyed by (seed, r).

    Failed replicates are NaN rows. Output does not depend on ``threads``.
    """
    tol = tol or Tolerances()
    jobs = [(dataset, method, seed, r, tol) for r in range(reps)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_bootstrap_one, jobs))
    else:
        results = [_bootstrap_one(j) for j in jobs]
    out = np.full((reps, 2 + dataset.k), np.nan)
    for r, res in enumerate(results):
        if res is not None:
            out[r] = res
    return out


def bootstrap_effects(dataset: Dataset, spec: ModelSpec, method: str = "gmm",
                      threads: int = 1) -> EffectReport:
    """Nonparametric bootstrap standard errors and intervals.

    Each replicate resamples n rows with replacement and reruns the full
    estimator. Failed replicates are excluded and counted; more than 10%
    failures is an error.
    """
    if spec.bootstrap_reps < 2:
        raise EstimationError("bootstrap standard errors need bootstrap_reps >= 2")
    tol = spec.tolerances
    point = _point_fn(method)(dataset, tol)
    reps = bootstrap_replicates(dataset, method, spec.bootstrap_reps, spec.seed, tol, threads)
    ok = ~np.isnan(reps).any(axis=1)
    n_failed = int((~ok).sum())
    if n_failed > MAX_BOOTSTRAP_FAILURE * spec.bootstrap_reps:
        raise EstimationError(f"{n_failed} of {spec.bootstrap_reps} bootstrap replicates failed; "
                              "data too fragile for bootstrap inference")
    good = reps[ok]
    if good.shape[0] < 2:
        raise EstimationError("fewer than two successful bootstrap replicates")
    se = good.std(axis=0, ddof=1)

    def interval(i):
        if spec.ci == "percentile":
            lo, hi = np.percentile(good[:, i], [2.5, 97.5])
            return (float(lo), float(hi))
        return wald_interval(float(point[i]), float(se[i]))

    per_mediator = [
        {"mediator": name, "product": float(point[2 + j]), "se": float(se[2 + j]),
         "ci": list(interval(2 + j))}
        for j, name in enumerate(dataset.mediator_names)
    ]
    return EffectReport(
        method=method, se_method="bootstrap",
        nde=float(point[0]), nie=float(point[1]),
        se_nde=float(se[0]), se_nie=float(se[1]),
        ci_nde=interval(0), ci_nie=interval(1),
        per_mediator=per_mediator, n=dataset.n, ci_type=spec.ci,
        bootstrap={"reps": spec.bootstrap_reps, "failed": n_failed, "seed": spec.seed},
    )


def estimate_effects(dataset: Dataset, spec: ModelSpec, threads: int = 1) -> list:
    """Every EffectReport requested by ``spec`` (methods x SE engines)."""
    from medgmm.baseline import fit_outcome_regression, regression_effects

    tol = spec.tolerances
    methods = ["gmm", "regression"] if spec.method == "both" else [spec.method]
    engines = ["sandwich", "bootstrap"] if spec.se_method == "both" else [spec.se_method]
    reports = []
    for method in methods:
        for engine in engines:
            if engine == "bootstrap":
                reports.append(bootstrap_effects(dataset, spec, method, threads))
            elif method == "gmm":
                first, theta = fit_gmm(dataset, tol)
                stacked = stacked_sandwich(dataset, first, theta, tol, spec.small_sample)
                reports.append(delta_effects(first, theta, stacked, dataset.mediator_names))
            else:
                fit = fit_outcome_regression(dataset, tol, spec.small_sample)
                reports.append(regression_effects(fit, dataset.mediator_names))
    return reports
