"""Data model shared by every estimator: datasets, model specs, designs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd

from medgmm.errors import ConstantExposureError, DataError

METHODS = ("gmm", "regression", "both")
SE_METHODS = ("sandwich", "bootstrap", "both")
MISSING_POLICIES = ("error", "drop")
CI_TYPES = ("wald", "percentile")


@dataclass(frozen=True)
class Tolerances:
    """Numerical thresholds. Defaults are engineering choices, not theory."""

    tol_score: float = 1e-8
    tol_solve: float = 1e-10
    max_iter: int = 100
    separation_norm: float = 1e3
    cond_max: float = 1e8
    overlap_min: float = 1e-3
    overlap_warn_share: float = 0.05
    hetero_alpha: float = 0.05
    jacobian_rtol: float = 1e-4
    jacobian_step: float = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    outcome: str
    exposure: str
    mediators: tuple[str, ...]
    covariates: tuple[str, ...] = ()
    method: str = "both"
    se_method: str = "sandwich"
    bootstrap_reps: int = 1000
    seed: int = 0
    missing: str = "error"
    ci: str = "wald"
    small_sample: bool = False
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        object.__setattr__(self, "mediators", tuple(self.mediators))
        object.__setattr__(self, "covariates", tuple(self.covariates))
        if not self.mediators:
            raise DataError("at least one mediator column is required")
        roles = [self.outcome, self.exposure, *self.mediators, *self.covariates]
        dupes = sorted({c for c in roles if roles.count(c) > 1})
        if dupes:
            raise DataError(f"columns assigned to more than one role: {', '.join(dupes)}")
        if self.method not in METHODS:
            raise DataError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.se_method not in SE_METHODS:
            raise DataError(f"se_method must be one of {SE_METHODS}, got {self.se_method!r}")
        if self.missing not in MISSING_POLICIES:
            raise DataError(f"missing must be one of {MISSING_POLICIES}, got {self.missing!r}")
        if self.ci not in CI_TYPES:
            raise DataError(f"ci must be one of {CI_TYPES}, got {self.ci!r}")
        if self.se_method != "sandwich" and self.bootstrap_reps < 1:
            raise DataError("bootstrap_reps must be >= 1")
        if self.seed < 0:
            raise DataError("seed must be a non-negative integer")

    @property
    def columns(self) -> list[str]:
        return [self.outcome, self.exposure, *self.mediators, *self.covariates]


def _frozen(arr, ndim):
    out = np.array(arr, dtype=float, copy=True)
    if ndim == 2 and out.ndim == 1:
        out = out.reshape(-1, 1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations of (Y, A, M_1..M_K, X). Immutable.

    ``x`` excludes the intercept; it may have zero columns.
    """

    y: np.ndarray
    a: np.ndarray
    m: np.ndarray
    x: np.ndarray
    outcome_name: str = "Y"
    exposure_name: str = "A"
    mediator_names: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()
    n_dropped: int = 0

    def __post_init__(self):
        y = _frozen(self.y, 1)
        a = _frozen(self.a, 1)
        m = _frozen(self.m, 2)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else np.zeros((y.shape[0], 0))
        x = _frozen(x, 2)
        n = y.shape[0]
        if y.ndim != 1 or a.ndim != 1:
            raise DataError("outcome and exposure must be vectors")
        if n < 1:
            raise DataError("dataset has no rows")
        if a.shape[0] != n or m.shape[0] != n or x.shape[0] != n:
            raise DataError("all columns must have the same length")
        if m.shape[1] < 1:
            raise DataError("at least one mediator is required (K >= 1)")
        for name, arr in (("outcome", y), ("exposure", a), ("mediators", m), ("covariates", x)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contain missing or non-finite values")
        med_names = tuple(self.mediator_names) or tuple(f"M{j + 1}" for j in range(m.shape[1]))
        cov_names = tuple(self.covariate_names) or tuple(f"X{j + 1}" for j in range(x.shape[1]))
        if len(med_names) != m.shape[1] or len(cov_names) != x.shape[1]:
            raise DataError("column labels do not match array shapes")
        for attr, val in (("y", y), ("a", a), ("m", m), ("x", x),
                          ("mediator_names", med_names), ("covariate_names", cov_names)):
            object.__setattr__(self, attr, val)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.m.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def exposure_binary(self) -> bool:
        return bool(np.all((self.a == 0) | (self.a == 1)))

    @property
    def exposure_constant(self) -> bool:
        return bool(np.all(self.a == self.a[0]))

    def take(self, rows) -> Dataset:
        """Row subset (with repetition allowed), e.g. a bootstrap resample."""
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.a[rows], self.m[rows], self.x[rows],
                       self.outcome_name, self.exposure_name,
                       self.mediator_names, self.covariate_names)

    def to_frame(self) -> pd.DataFrame:
        cols = {self.outcome_name: self.y, self.exposure_name: self.a}
        cols.update({nm: self.m[:, j] for j, nm in enumerate(self.mediator_names)})
        cols.update({nm: self.x[:, j] for j, nm in enumerate(self.covariate_names)})
        return pd.DataFrame(cols)

    def same_values(self, other: Dataset) -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("y", "a", "m", "x")
        ) and (self.mediator_names, self.covariate_names) == (
            other.mediator_names, other.covariate_names)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        vals = _frozen(self.values, 2)
        if vals.shape[1] != len(self.labels):
            raise ValueError("label count does not match design width")
        if not np.all(vals[:, 0] == 1.0):
            raise ValueError("first design column must be the intercept")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "labels", tuple(self.labels))


def validate_dataset(raw: pd.DataFrame, spec: ModelSpec,
                     allow_constant_exposure: bool = False) -> Dataset:
    """Pull the columns named in ``spec`` out of ``raw`` and check them.

    Raises
    ------
    DataError
        Missing column, non-numeric cell, missing values under the
        ``"error"`` policy, or no rows left after filtering.
    ConstantExposureError
        The exposure takes a single value (unless ``allow_constant_exposure``,
        which diagnostics use to report the failure instead).
    """
    missing_cols = [c for c in spec.columns if c not in raw.columns]
    if missing_cols:
        raise DataError(f"column(s) not found in data: {', '.join(missing_cols)}")
    frame = raw.loc[:, spec.columns]
    numeric = {}
    for col in spec.columns:
        series = frame[col]
        converted = pd.to_numeric(series, errors="coerce")
        bad = converted.isna() & series.notna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise DataError(f"non-numeric value {series.iloc[row]!r} in column {col!r} (row {row + 1})")
        numeric[col] = converted.astype(float)
    frame = pd.DataFrame(numeric)
    incomplete = ~np.isfinite(frame.to_numpy()).all(axis=1)
    n_dropped = int(incomplete.sum())
    if n_dropped and spec.missing == "error":
        cols = [c for c in spec.columns if not np.isfinite(frame[c].to_numpy()).all()]
        raise DataError(f"{n_dropped} row(s) with missing values (columns: {', '.join(cols)}); "
                        "use the drop policy to discard them")
    frame = frame.loc[~incomplete]
    if len(frame) == 0:
        raise DataError("zero rows remain after filtering")
    ds = Dataset(
        y=frame[spec.outcome].to_numpy(),
        a=frame[spec.exposure].to_numpy(),
        m=frame[list(spec.mediators)].to_numpy(),
        x=frame[list(spec.covariates)].to_numpy().reshape(len(frame), len(spec.covariates)),
        outcome_name=spec.outcome,
        exposure_name=spec.exposure,
        mediator_names=spec.mediators,
        covariate_names=spec.covariates,
        n_dropped=n_dropped,
    )
    if ds.exposure_constant and not allow_constant_exposure:
        raise ConstantExposureError(
            f"constant exposure: {spec.exposure!r} takes a single value, "
            "so Var(A|X) = 0 and condition (1) for identification is violated")
    return ds


def read_csv(path, spec: ModelSpec, allow_constant_exposure: bool = False) -> Dataset:
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return validate_dataset(raw, spec, allow_constant_exposure)


def build_design(dataset: Dataset, include_exposure: bool = False,
                 include_mediators: bool = False) -> DesignMatrix:
    """Intercept-first regressors ``[1, A, M_1..M_K, X_1..X_p]``.

    Column order is part of the external contract: coefficient vectors in
    reports follow it.
    """
    blocks: list[np.ndarray] = [np.ones((dataset.n, 1))]
    labels: list[str] = ["(intercept)"]
    if include_exposure:
        blocks.append(dataset.a[:, None])
        labels.append(dataset.exposure_name)
    if include_mediators:
        blocks.append(dataset.m)
        labels.extend(dataset.mediator_names)
    blocks.append(dataset.x)
    labels.extend(dataset.covariate_names)
    return DesignMatrix(np.hstack(blocks), tuple(labels))


def covariate_design(dataset: Dataset) -> np.ndarray:
    """``(1, X)`` as a plain array; the most common design in the package."""
    return np.hstack([np.ones((dataset.n, 1)), dataset.x])


def parse_columns(text: str | Sequence[str] | None) -> tuple[str, ...]:
    if text is None:
        return ()
    if isinstance(text, str):
        return tuple(c.strip() for c in text.split(",") if c.strip())
    return tuple(text)
