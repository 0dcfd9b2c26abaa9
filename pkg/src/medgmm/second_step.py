"""Second step: the exactly identified G-estimation moment system.

Each observation contributes ``(A - pi(X)) * psi`` where

    psi_j     = (M_j - beta1_j A - G_j(X)) (Y - theta2' M),   j = 1..K
    psi_{K+1} = Y - theta1 A - theta2' M

``psi`` is affine in ``theta = (theta2, theta1)``, so the empirical moment
mean is ``c - B theta`` and the estimator is a single linear solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from medgmm.core import Dataset, Tolerances
from medgmm.errors import EstimationError, IdentificationError
from medgmm.first_step import FirstStepFit


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """``E_n[Psi(theta)] = c - B theta`` with unknowns ordered (theta2, theta1).

    ``row_scale``/``col_scale`` put B on a unit scale (standard deviations of
    the factors entering each entry) for conditioning checks.
    """

    B: np.ndarray
    c: np.ndarray
    row_scale: np.ndarray | None = None
    col_scale: np.ndarray | None = None

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        c = np.asarray(self.c, dtype=float)
        size = B.shape[0]
        if B.shape != (size, size) or c.shape != (size,) or size < 2:
            raise ValueError(f"inconsistent moment system shapes {B.shape}, {c.shape}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "c", c)
        for name in ("row_scale", "col_scale"):
            val = getattr(self, name)
            object.__setattr__(self, name, np.ones(size) if val is None
                               else np.asarray(val, dtype=float))

    @property
    def k(self) -> int:
        return self.B.shape[0] - 1

    @property
    def scaled_B(self) -> np.ndarray:
        return self.B / self.row_scale[:, None] / self.col_scale[None, :]

    def to_dict(self) -> dict:
        return {"B": self.B.tolist(), "c": self.c.tolist()}


@dataclass(frozen=True, eq=False)
class ThetaFit:
    theta2: np.ndarray
    theta1: float
    system: MomentSystem
    residual_norm: float
    condition_estimate: float

    @property
    def theta(self) -> np.ndarray:
        return np.append(self.theta2, self.theta1)

    def to_dict(self) -> dict:
        return {
            "theta2": self.theta2.tolist(),
            "theta1": float(self.theta1),
            "residual_norm": self.residual_norm,
            "condition_estimate": self.condition_estimate,
            "system": self.system.to_dict(),
        }


def evaluate_psi(y, a, m, beta1, theta, g_hat):
    """Unweighted moment vector psi for one observation or a batch.

    Scalars ``y``/``a`` with ``m``/``g_hat`` of length K give a length K+1
    vector; vectors of length n with (n, K) matrices give an (n, K+1) array.
    """
    beta1 = np.asarray(beta1, dtype=float)
    theta = np.asarray(theta, dtype=float)
    m = np.asarray(m, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    k = beta1.shape[0]
    if theta.shape != (k + 1,) or m.shape[-1] != k or g_hat.shape != m.shape:
        raise ValueError(f"dimension mismatch: K={k}, theta {theta.shape}, "
                         f"m {m.shape}, g_hat {g_hat.shape}")
    theta2, theta1 = theta[:k], theta[k]
    y = np.asarray(y, dtype=float)
    a = np.asarray(a, dtype=float)
    outcome_part = y - m @ theta2
    mediator_resid = m - np.multiply.outer(a, beta1) - g_hat
    return np.concatenate(
        [mediator_resid * outcome_part[..., None],
         (outcome_part - theta1 * a)[..., None]],
        axis=-1,
    )


def empirical_psi_mean(dataset: Dataset, first: FirstStepFit, theta) -> np.ndarray:
    """``E_n[(A - pi_hat) psi(theta)]`` evaluated row by row from the definition."""
    psi = evaluate_psi(dataset.y, dataset.a, dataset.m, first.beta1, theta,
                       first.fitted_mediator_means(dataset))
    return ((dataset.a - first.pi_hat)[:, None] * psi).mean(axis=0)


def _sd(v):
    s = float(np.std(v))
    return s if s > 0 else 1.0


def assemble_moment_system(dataset: Dataset, first: FirstStepFit) -> MomentSystem:
    n, k = dataset.n, dataset.k
    e = dataset.a - first.pi_hat
    r = first.mediator_residuals
    er = e[:, None] * r
    B = np.zeros((k + 1, k + 1))
    B[:k, :k] = er.T @ dataset.m / n
    B[k, :k] = e @ dataset.m / n
    B[k, k] = e @ dataset.a / n
    c = np.empty(k + 1)
    c[:k] = er.T @ dataset.y / n
    c[k] = e @ dataset.y / n
    sd_e = _sd(e)
    # Mediator rows are scaled by the raw mediator spread, not the residual
    # spread, so a mediator fully explained by (A, X) shows up as a null row.
    row_scale = np.array([sd_e * _sd(dataset.m[:, j]) for j in range(k)] + [sd_e])
    col_scale = np.array([_sd(dataset.m[:, j]) for j in range(k)] + [_sd(dataset.a)])
    return MomentSystem(B=B, c=c, row_scale=row_scale, col_scale=col_scale)


def scaled_condition(system: MomentSystem) -> float:
    scaled = system.scaled_B
    if not np.all(np.isfinite(scaled)):
        return float("inf")
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = float(np.linalg.cond(scaled))
    return cond if np.isfinite(cond) else float("inf")


def solve_theta(system: MomentSystem, tol: Tolerances | None = None) -> ThetaFit:
    """Solve ``B theta = c``.

    Raises
    ------
    IdentificationError
        B is singular or its unit-scaled condition number exceeds
        ``tol.cond_max``: the rank condition on dE[Psi]/dtheta fails
        empirically.
    """
    tol = tol or Tolerances()
    B, c = system.B, system.c
    if not (np.all(np.isfinite(B)) and np.all(np.isfinite(c))):
        raise EstimationError("moment system contains non-finite entries")
    cond = scaled_condition(system)
    if cond > tol.cond_max:
        raise IdentificationError(
            f"moment Jacobian is singular or ill-conditioned (scaled condition number "
            f"{cond:.3g} > {tol.cond_max:.3g}); the rank condition for the outcome "
            "parameters fails: check Var(A|X) > 0 and that the mediator variances "
            "depend on the exposure")
    # Equilibrated solve, then one step of iterative refinement.
    scaled = system.scaled_B
    rhs = c / system.row_scale
    u = np.linalg.solve(scaled, rhs)
    u += np.linalg.solve(scaled, rhs - scaled @ u)
    theta = u / system.col_scale
    residual = float(np.max(np.abs(c - B @ theta)))
    if residual > tol.tol_solve * (1.0 + float(np.max(np.abs(c)))):
        raise EstimationError(f"linear solve residual {residual:.3g} exceeds tolerance")
    k = system.k
    return ThetaFit(theta2=theta[:k].copy(), theta1=float(theta[k]), system=system,
                    residual_norm=residual, condition_estimate=cond)
