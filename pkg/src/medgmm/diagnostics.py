"""Identification diagnostics for the outcome parameters.

The moment Jacobian factors as ``det(G) = (-1)^(K+1) G1 det(G2)`` with
``G1 = E[Var(A|X)]`` and ``G2 = E[(A - pi(X)) Var(M|A,X)]``. Estimation
therefore needs (1) exposure variation given X, and (2) mediator variances
that change with the exposure. Both are checked empirically here, together
with the conditioning of the assembled moment matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from medgmm._linalg import ols
from medgmm.core import Dataset, Tolerances, build_design
from medgmm.errors import MedGMMError
from medgmm.first_step import FirstStepFit, fit_first_step
from medgmm.second_step import MomentSystem, assemble_moment_system, scaled_condition

VERDICTS = ("ok", "warn", "fail")

EXPLANATION = (
    "The outcome parameters are identified only if the moment Jacobian is "
    "non-singular. Its determinant is proportional to E[Var(A|X)] times "
    "det(E[(A - pi(X)) Var(M|A,X)]), so it vanishes when Var(A|X) = 0 "
    "(condition 1: no exposure variation within covariate strata) or when "
    "Var(M|A,X) = Var(M|X) (condition 2: mediator variances do not depend "
    "on the exposure). The overlap statistic checks condition 1, the "
    "heteroscedasticity p-values check condition 2 mediator by mediator, and "
    "the condition number of the unit-scaled moment matrix stands in for det(G2)."
)


def _finite_or_none(v):
    return float(v) if v is not None and math.isfinite(v) else None


@dataclass
class IdentificationReport:
    overlap_stat: float
    g1_hat: float
    low_overlap_share: float
    hetero_pvalues: list
    condition_number: float
    block_condition_number: float
    verdict: str
    reasons: list = field(default_factory=list)
    exposure_model: str = "logistic"
    mediator_names: tuple = ()

    def to_dict(self) -> dict:
        names = list(self.mediator_names) or [f"M{j + 1}" for j in range(len(self.hetero_pvalues))]
        return {
            "verdict": self.verdict,
            "reasons": list(self.reasons),
            "exposure_model": self.exposure_model,
            "overlap_stat": float(self.overlap_stat),
            "g1_hat": float(self.g1_hat),
            "low_overlap_share": float(self.low_overlap_share),
            "hetero_pvalues": {nm: float(p) for nm, p in zip(names, self.hetero_pvalues)},
            "condition_number": _finite_or_none(self.condition_number),
            "block_condition_number": _finite_or_none(self.block_condition_number),
            "explanation": EXPLANATION,
        }

    def to_text(self) -> str:
        names = list(self.mediator_names) or [f"M{j + 1}" for j in range(len(self.hetero_pvalues))]
        lines = [
            "Identification diagnostics",
            f"  verdict                 {self.verdict}",
            f"  overlap statistic       {self.overlap_stat:.6g}",
            f"  E[Var(A|X)] estimate    {self.g1_hat:.6g}",
            f"  share near overlap min  {self.low_overlap_share:.4g}",
            f"  condition number of B   {self.condition_number:.6g}",
            f"  mediator block cond.    {self.block_condition_number:.6g}",
        ]
        for nm, p in zip(names, self.hetero_pvalues):
            lines.append(f"  heteroscedasticity p ({nm})  {p:.4g}")
        for r in self.reasons:
            lines.append(f"  - {r}")
        return "\n".join(lines)


def exposure_variances(first: FirstStepFit, dataset: Dataset | None = None) -> np.ndarray:
    """Estimated Var(A | X = x_i) for every row.

    ``pi_i (1 - pi_i)`` for a binary exposure. The linear exposure model has
    no covariate-specific variance, so every row gets the sample variance of
    ``A - pi_hat`` (needs ``dataset``).
    """
    if first.exposure_model == "logistic":
        return first.pi_hat * (1.0 - first.pi_hat)
    if dataset is None:
        raise ValueError("continuous exposures need the dataset to compute overlap")
    return np.full(first.pi_hat.shape, np.var(dataset.a - first.pi_hat))


def check_overlap(first: FirstStepFit, dataset: Dataset | None = None) -> float:
    """Smallest estimated Var(A|X=x_i) over the sample."""
    return float(np.min(exposure_variances(first, dataset)))


def expected_exposure_variance(first: FirstStepFit, dataset: Dataset | None = None) -> float:
    """Plug-in estimate of E[Var(A|X)]."""
    return float(np.mean(exposure_variances(first, dataset)))


def low_overlap_share(first: FirstStepFit, dataset: Dataset | None = None,
                      tol: Tolerances | None = None) -> float:
    """Fraction of rows whose Var(A|X) is within 10x of ``tol.overlap_min``."""
    tol = tol or Tolerances()
    return float(np.mean(exposure_variances(first, dataset) <= 10 * tol.overlap_min))


def check_heteroscedasticity(dataset: Dataset, first: FirstStepFit) -> np.ndarray:
    """Per-mediator p-values for dependence of Var(M_j | A, X) on A.

    Squared first-step residuals are regressed on (1, A, X); the exposure
    coefficient gets a heteroscedasticity-robust (HC0) standard error and a
    two-sided normal p-value. Small values support condition (2).
    """
    design = build_design(dataset, include_exposure=True)
    x = design.values
    sq = first.mediator_residuals ** 2
    coef = ols(x, sq, labels=design.labels)
    resid = sq - x @ coef
    xtx_inv = np.linalg.inv(x.T @ x)
    pvals = np.empty(dataset.k)
    for j in range(dataset.k):
        meat = (x * resid[:, j, None] ** 2).T @ x
        var_a = (xtx_inv @ meat @ xtx_inv)[1, 1]
        se = math.sqrt(max(var_a, 0.0))
        if se == 0.0:
            pvals[j] = 1.0 if coef[1, j] == 0 else 0.0
        else:
            pvals[j] = 2.0 * stats.norm.sf(abs(coef[1, j]) / se)
    return pvals


def _block_condition(system: MomentSystem) -> float:
    k = system.k
    block = system.scaled_B[:k, :k]
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = float(np.linalg.cond(block))
    return cond if math.isfinite(cond) else float("inf")


def _verdict(overlap, low_share, cond, pvals, tol: Tolerances):
    reasons, level = [], 0
    if overlap <= tol.overlap_min:
        level = 2
        reasons.append(f"condition (1) violated: overlap statistic {overlap:.3g} <= "
                       f"{tol.overlap_min:g} (Var(A|X) is essentially zero for some units)")
    elif low_share > tol.overlap_warn_share:
        # A few tail units near the threshold are expected in any sizeable
        # sample; warn only when they are more than a small share.
        level = max(level, 1)
        reasons.append(f"condition (1) weak: {100 * low_share:.3g}% of units have Var(A|X) "
                       f"within one order of magnitude of {tol.overlap_min:g}")
    if not cond <= tol.cond_max:
        level = 2
        reasons.append(f"rank condition fails: condition number {cond:.3g} > {tol.cond_max:g}")
    elif cond > tol.cond_max / 10:
        level = max(level, 1)
        reasons.append(f"rank condition weak: condition number {cond:.3g} is within one "
                       f"order of magnitude of {tol.cond_max:g}")
    weak = [j for j, p in enumerate(pvals) if not p < tol.hetero_alpha]
    if weak:
        level = max(level, 1)
        reasons.append(
            "condition (2) not supported for mediator(s) "
            + ", ".join(str(j + 1) for j in weak)
            + f": no significant dependence of the residual variance on the exposure "
              f"(p >= {tol.hetero_alpha:g})")
    return VERDICTS[level], reasons


def decompose_rank_condition(dataset: Dataset, first: FirstStepFit,
                             system: MomentSystem | None = None,
                             tol: Tolerances | None = None) -> IdentificationReport:
    """Bundle the overlap, heteroscedasticity and conditioning checks.

    Read-only over its inputs; never raises on a failed check (that is what
    the verdict is for).
    """
    tol = tol or Tolerances()
    system = system if system is not None else assemble_moment_system(dataset, first)
    overlap = check_overlap(first, dataset)
    g1 = expected_exposure_variance(first, dataset)
    share = low_overlap_share(first, dataset, tol)
    pvals = check_heteroscedasticity(dataset, first)
    cond = scaled_condition(system)
    verdict, reasons = _verdict(overlap, share, cond, pvals, tol)
    return IdentificationReport(
        overlap_stat=overlap, g1_hat=g1, low_overlap_share=share,
        hetero_pvalues=pvals.tolist(),
        condition_number=cond, block_condition_number=_block_condition(system),
        verdict=verdict, reasons=reasons, exposure_model=first.exposure_model,
        mediator_names=dataset.mediator_names,
    )


def constant_exposure_report(dataset: Dataset) -> IdentificationReport:
    return IdentificationReport(
        overlap_stat=0.0, g1_hat=0.0, low_overlap_share=1.0,
        hetero_pvalues=[1.0] * dataset.k,
        condition_number=float("inf"), block_condition_number=float("inf"),
        verdict="fail",
        reasons=["condition (1) violated: the exposure is constant, so Var(A|X) = 0"],
        exposure_model="logistic" if dataset.exposure_binary else "linear",
        mediator_names=dataset.mediator_names,
    )


def diagnose(dataset: Dataset, tol: Tolerances | None = None) -> IdentificationReport:
    """First step, assembly and diagnostics only; never reports effects."""
    tol = tol or Tolerances()
    if dataset.exposure_constant:
        return constant_exposure_report(dataset)
    try:
        first = fit_first_step(dataset, tol)
    except MedGMMError as exc:
        report = constant_exposure_report(dataset)
        report.reasons = [f"condition (1) violated: first-step fit failed ({exc})"]
        return report
    return decompose_rank_condition(dataset, first, None, tol)
