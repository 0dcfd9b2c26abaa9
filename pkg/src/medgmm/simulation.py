"""Monte Carlo harness for the three-mediator design with a hidden confounder.

Data are generated as

    X ~ N(0, 1);  U | X ~ N(1 + 0.5 X, 1);  A | X, U ~ Bernoulli(expit(0.8 + 1.2 X))
    M | A, X, U ~ N(mu(A, X) + eta U, Sigma(A)),  Sigma_ij = 2^-|i-j| (1 + delta A)
    Y | A, M, X, U ~ N(1.3 + 2.5 A + 1.2 M1 + 0.8 M2 + M3 + 1.5 X + eta U, 1)

with U discarded before estimation. ``eta`` sets the strength of
mediator-outcome confounding and ``delta`` the heteroscedasticity that
identifies the two-step estimator.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from functools import lru_cache

import numpy as np

from medgmm._linalg import expit
from medgmm.baseline import fit_outcome_regression, regression_effects
from medgmm.core import Dataset, Tolerances
from medgmm.errors import MedGMMError
from medgmm.inference import delta_effects, fit_gmm, stacked_sandwich

MEDIATOR_INTERCEPT = np.array([1.2, 0.5, 1.3])
MEDIATOR_EXPOSURE = np.array([1.5, 1.2, 1.0])
MEDIATOR_COVARIATE = np.array([1.1, 1.8, 0.5])
OUTCOME_MEDIATOR = np.array([1.2, 0.8, 1.0])
OUTCOME_INTERCEPT, OUTCOME_EXPOSURE, OUTCOME_COVARIATE = 1.3, 2.5, 1.5

NDE_TRUE = OUTCOME_EXPOSURE
NIE_TRUE = float(MEDIATOR_EXPOSURE @ OUTCOME_MEDIATOR)  # 3.76

ESTIMATORS = ("NDE", "NIE", "NDE_reg", "NIE_reg")
MAX_FAILED_FRACTION = 0.05

# RNG stream tags, one independent stream per generated variable.
_TAG_X, _TAG_U, _TAG_A, _TAG_M, _TAG_Y = range(5)


@dataclass(frozen=True)
class SimConfig:
    n: int = 800
    eta: float = 0.0
    delta: float = 5.0
    reps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")
        if 1.0 + self.delta <= 0:
            raise ValueError("1 + delta must be positive")

    @property
    def truth(self) -> dict:
        return {"NDE": NDE_TRUE, "NIE": NIE_TRUE}


@dataclass
class MetricRow:
    estimator: str
    abs_bias: float
    mc_sd: float
    mean_se: float
    cov95: float
    n_used: int = 0


@dataclass
class MonteCarloResult:
    config: SimConfig
    rows: list
    n_failed: int
    estimates: np.ndarray

    @property
    def reliable(self) -> bool:
        return self.n_failed <= MAX_FAILED_FRACTION * self.config.reps

    def row(self, estimator: str) -> MetricRow:
        return next(r for r in self.rows if r.estimator == estimator)


def toeplitz_sigma(delta: float, a: int, k: int = 3) -> np.ndarray:
    """Covariance ``2^-|i-j| (1 + delta a)`` of the mediators given A = a."""
    scale = 1.0 + delta * a
    if scale <= 0:
        raise ValueError(f"1 + delta*a = {scale} must be positive")
    idx = np.arange(k)
    return 2.0 ** (-np.abs(idx[:, None] - idx[None, :])) * scale


@lru_cache(maxsize=64)
def _cholesky(delta: float, a: int, k: int = 3) -> np.ndarray:
    return np.linalg.cholesky(toeplitz_sigma(delta, a, k))


def _stream(seed: int, replicate: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate, tag)))


def generate_dataset(config: SimConfig, replicate_index: int = 0,
                     return_latent: bool = False):
    """One simulated dataset, deterministic in ``(config.seed, replicate_index)``.

    With ``return_latent`` the hidden confounder U is returned alongside.
    """
    n = config.n
    x = _stream(config.seed, replicate_index, _TAG_X).standard_normal(n)
    u = 1.0 + 0.5 * x + _stream(config.seed, replicate_index, _TAG_U).standard_normal(n)
    p = expit(0.8 + 1.2 * x)
    a = (_stream(config.seed, replicate_index, _TAG_A).random(n) < p).astype(float)
    z = _stream(config.seed, replicate_index, _TAG_M).standard_normal((n, 3))
    noise = np.where(a[:, None] == 1.0,
                     z @ _cholesky(config.delta, 1).T,
                     z @ _cholesky(config.delta, 0).T)
    m = (MEDIATOR_INTERCEPT + np.outer(a, MEDIATOR_EXPOSURE) + np.outer(x, MEDIATOR_COVARIATE)
         + config.eta * u[:, None] + noise)
    y = (OUTCOME_INTERCEPT + OUTCOME_EXPOSURE * a + m @ OUTCOME_MEDIATOR
         + OUTCOME_COVARIATE * x + config.eta * u
         + _stream(config.seed, replicate_index, _TAG_Y).standard_normal(n))
    ds = Dataset(y=y, a=a, m=m, x=x[:, None], outcome_name="Y", exposure_name="A",
                 mediator_names=("M1", "M2", "M3"), covariate_names=("X",))
    if return_latent:
        return ds, u
    return ds


def run_replicate(config: SimConfig, replicate_index: int,
                  tol: Tolerances | None = None):
    """``(4, 3)`` array of (estimate, se, covered) per estimator, or None on failure."""
    tol = tol or Tolerances()
    ds = generate_dataset(config, replicate_index)
    try:
        first, theta = fit_gmm(ds, tol)
        gmm = delta_effects(first, theta, stacked_sandwich(ds, first, theta, tol))
        reg = regression_effects(fit_outcome_regression(ds, tol))
    except MedGMMError:
        return None
    out = np.empty((4, 3))
    for i, (rep, which) in enumerate([(gmm, "nde"), (gmm, "nie"), (reg, "nde"), (reg, "nie")]):
        est = getattr(rep, which)
        lo, hi = getattr(rep, f"ci_{which}")
        truth = NDE_TRUE if which == "nde" else NIE_TRUE
        out[i] = (est, getattr(rep, f"se_{which}"), float(lo <= truth <= hi))
    return out


def summarize(estimates: np.ndarray) -> list:
    """MetricRows from a ``(reps, 4, 3)`` array; NaN replicates are skipped."""
    ok = ~np.isnan(estimates).any(axis=(1, 2))
    good = estimates[ok]
    rows = []
    for i, name in enumerate(ESTIMATORS):
        truth = NDE_TRUE if name.startswith("NDE") else NIE_TRUE
        est, se, cover = good[:, i, 0], good[:, i, 1], good[:, i, 2]
        if est.size == 0:
            rows.append(MetricRow(name, float("nan"), float("nan"), float("nan"),
                                  float("nan"), 0))
            continue
        sd = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
        rows.append(MetricRow(
            estimator=name,
            abs_bias=float(abs(np.mean(est) - truth)),
            mc_sd=sd,
            mean_se=float(np.sqrt(np.mean(se ** 2))),
            cov95=float(np.mean(cover)),
            n_used=int(est.size),
        ))
    return rows


def run_monte_carlo(config: SimConfig, threads: int = 1,
                    tol: Tolerances | None = None) -> MonteCarloResult:
    """Fit both estimators on ``config.reps`` datasets and aggregate.

    Replicates are independent; results are reduced in replicate order, so
    the output is identical for any ``threads``.
    """
    tol = tol or Tolerances()
    indices = range(config.reps)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: run_replicate(config, r, tol), indices))
    else:
        results = [run_replicate(config, r, tol) for r in indices]
    estimates = np.full((config.reps, 4, 3), np.nan)
    n_failed = 0
    for r, res in enumerate(results):
        if res is None:
            n_failed += 1
        else:
            estimates[r] = res
    return MonteCarloResult(config=config, rows=summarize(estimates),
                            n_failed=n_failed, estimates=estimates)


def format_value(value: float) -> str:
    """Three decimals, round-half-even on the decimal representation."""
    if not np.isfinite(value):
        return "nan"
    return str(Decimal(repr(float(value))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


_METRICS = (("|Bias|", "abs_bias"), ("sqrt(Var)", "mc_sd"),
            ("sqrt(EVar)", "mean_se"), ("Cov95", "cov95"))


def format_table(rows: list, result: MonteCarloResult | None = None):
    """Aligned text grid (metrics by estimator) and a JSON-ready dict.

    Values below 0.0005 print as 0.000; the dict keeps full precision.
    """
    if not rows:
        raise ValueError("no metric rows to format")
    width = 10
    lines = []
    if result is not None:
        c = result.config
        lines.append(f"n={c.n} eta={c.eta:g} delta={c.delta:g} reps={c.reps} seed={c.seed}")
    lines.append(" " * 12 + "".join(f"{r.estimator:>{width}}" for r in rows))
    for label, attr in _METRICS:
        lines.append(f"{label:<12}" + "".join(f"{format_value(getattr(r, attr)):>{width}}"
                                               for r in rows))
    if result is not None:
        lines.append(f"failed replicates: {result.n_failed}"
                     + ("" if result.reliable else " (UNRELIABLE: more than 5% failed)"))
    payload = {"rows": [asdict(r) for r in rows]}
    if result is not None:
        payload.update({
            "config": asdict(result.config),
            "truth": result.config.truth,
            "failed_replicates": result.n_failed,
            "reliable": result.reliable,
        })
    return "\n".join(lines) + "\n", payload
