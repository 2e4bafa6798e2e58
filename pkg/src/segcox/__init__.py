"""Segmented Cox hazard estimation under covariate measurement error.

A library and CLI for fitting the changepoint relative-risk model when the
main covariate is observed through an error-prone surrogate: regression
calibration and induced-risk bias corrections, four validation-data designs
for learning the error model, covariance matrices corrected for nuisance
estimation error, and a deterministic replication harness.
"""

__version__ = "0.1.0"

from .errors import ConfigError, EstimationError, SchemaError, SegcoxError
from .model import Cohort, NuisanceParams, SubjectRecord, ThetaParams, hinge, relative_risk
from .datagen import (
    DESIGNS,
    METHODS,
    ScenarioConfig,
    ValidationSample,
    calibrate_baseline_hazard,
    event_probability,
    generate_cohort,
    generate_validation,
    substream,
)
from .nuisance import NuisanceEstimate, psi_rm, psi_x, solve_nuisance
from .calibration import (
    AnalysisDataset,
    PosteriorMoments,
    build_analysis_dataset,
    expected_hinge,
    induced_rr,
    induced_rr_loggrad,
    posterior_moments,
)
from .solver import (
    FitResult,
    corrected_covariance,
    naive_covariance,
    rr2_fit,
    score_and_info,
    score_residuals,
    solve_score,
    u_phi_jacobian,
)
from .harness import (
    GridEntry,
    ReplicationResult,
    ScenarioSummary,
    run_grid,
    run_replication,
    summarize,
)

__all__ = [
    "__version__",
    "SegcoxError",
    "EstimationError",
    "ConfigError",
    "SchemaError",
    "ThetaParams",
    "NuisanceParams",
    "SubjectRecord",
    "Cohort",
    "hinge",
    "relative_risk",
    "DESIGNS",
    "METHODS",
    "ScenarioConfig",
    "ValidationSample",
    "substream",
    "event_probability",
    "calibrate_baseline_hazard",
    "generate_cohort",
    "generate_validation",
    "NuisanceEstimate",
    "psi_x",
    "psi_rm",
    "solve_nuisance",
    "PosteriorMoments",
    "AnalysisDataset",
    "posterior_moments",
    "expected_hinge",
    "induced_rr",
    "induced_rr_loggrad",
    "build_analysis_dataset",
    "FitResult",
    "score_and_info",
    "solve_score",
    "score_residuals",
    "u_phi_jacobian",
    "naive_covariance",
    "corrected_covariance",
    "rr2_fit",
    "ReplicationResult",
    "ScenarioSummary",
    "GridEntry",
    "run_replication",
    "summarize",
    "run_grid",
]
