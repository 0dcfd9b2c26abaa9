import numpy as np
import scipy.linalg
import scipy.special

from medgmm.errors import RankDeficiencyError

RANK_RTOL = 1e-10


def ols(design, response, labels=None):
    """Least squares via column-pivoted QR; refuses rank-deficient designs.

    ``response`` may be a vector or an (n, m) matrix of responses sharing
    one design. Returns coefficients with the same trailing shape.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    n, d = design.shape
    if n < d:
        raise RankDeficiencyError(f"design has {n} rows but {d} columns")
    q, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size and diag[-1] <= RANK_RTOL * diag[0] * max(n, d):
        bad = piv[-1]
        name = labels[bad] if labels is not None else f"column {bad}"
        raise RankDeficiencyError(f"rank-deficient design (collinear column: {name})")
    coef_piv = scipy.linalg.solve_triangular(r, q.T @ response)
    coef = np.empty_like(coef_piv)
    coef[piv] = coef_piv
    return coef


def expit(eta):
    return scipy.special.expit(eta)
