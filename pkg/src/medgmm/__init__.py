"""Two-step method-of-moments mediation analysis with multiple mediators.

Natural direct and indirect effects are estimated under possible unmeasured
mediator-outcome confounding by exploiting heteroscedasticity of the
mediators with respect to the exposure. A regression-based estimator that
assumes no unmeasured confounding is provided for comparison.
"""

from medgmm.baseline import RegressionFit, fit_outcome_regression, regression_effects
from medgmm.core import (
    Dataset,
    DesignMatrix,
    ModelSpec,
    Tolerances,
    build_design,
    read_csv,
    validate_dataset,
)
from medgmm.diagnostics import (
    IdentificationReport,
    check_heteroscedasticity,
    check_overlap,
    decompose_rank_condition,
    diagnose,
)
from medgmm.errors import (
    ConstantExposureError,
    ConvergenceError,
    DataError,
    EstimationError,
    IdentificationError,
    MedGMMError,
    RankDeficiencyError,
    SeparationError,
)
from medgmm.first_step import (
    FirstStepFit,
    fit_exposure_mean,
    fit_first_step,
    fit_mediator_regressions,
    fit_propensity,
)
from medgmm.inference import (
    EffectReport,
    StackedFit,
    bootstrap_effects,
    delta_effects,
    estimate_effects,
    fit_gmm,
    stacked_sandwich,
)
from medgmm.second_step import (
    MomentSystem,
    ThetaFit,
    assemble_moment_system,
    empirical_psi_mean,
    evaluate_psi,
    solve_theta,
)
from medgmm.simulation import (
    MetricRow,
    MonteCarloResult,
    SimConfig,
    format_table,
    generate_dataset,
    run_monte_carlo,
    toeplitz_sigma,
)

__version__ = "0.1.0"

__all__ = [
    "ConstantExposureError",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DesignMatrix",
    "EffectReport",
    "EstimationError",
    "FirstStepFit",
    "IdentificationError",
    "IdentificationReport",
    "MedGMMError",
    "MetricRow",
    "ModelSpec",
    "MomentSystem",
    "MonteCarloResult",
    "RankDeficiencyError",
    "RegressionFit",
    "SeparationError",
    "SimConfig",
    "StackedFit",
    "ThetaFit",
    "Tolerances",
    "assemble_moment_system",
    "bootstrap_effects",
    "build_design",
    "check_heteroscedasticity",
    "check_overlap",
    "decompose_rank_condition",
    "delta_effects",
    "diagnose",
    "empirical_psi_mean",
    "estimate_effects",
    "evaluate_psi",
    "fit_exposure_mean",
    "fit_first_step",
    "fit_gmm",
    "fit_mediator_regressions",
    "fit_outcome_regression",
    "fit_propensity",
    "format_table",
    "generate_dataset",
    "read_csv",
    "regression_effects",
    "run_monte_carlo",
    "solve_theta",
    "stacked_sandwich",
    "toeplitz_sigma",
    "validate_dataset",
]
