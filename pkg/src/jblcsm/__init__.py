"""Jenss-Bayley latent change score models with individual measurement occasions."""

__version__ = "0.1.0"

from .errors import (
    ConditionAbortError,
    DataFormatError,
    DivergentCurveError,
    JBLCSMError,
    NonPositiveDefiniteError,
)
from .estimation import (
    Dataset,
    FitConfig,
    FitResult,
    ImproperFlags,
    detect_improper,
    fiml_loglik,
    fit,
    fit_indices,
    standard_errors,
    wald_ci,
    wald_p_value,
)
from .estimator import JenssBayleyLCSM
from .model import (
    GrowthFactorVector,
    ImpliedMoments,
    IndividualSchedule,
    LoadingBundle,
    ModelSpec,
    PopulationParameters,
    growth_loadings,
    implied_moments,
    interval_matrix,
    jb_rate,
    jb_value,
    loading_bundle,
    midpoints,
    rate_loadings,
)
from .scores import (
    LatentVariableSet,
    ScoreMatrices,
    factor_scores,
    latent_covariance,
    mean_rate_curve,
    mean_true_scores,
    rate_curve_on_grid,
    score_matrices,
)
from .simulation import (
    MODEL_KEYS,
    MODEL_SPECS,
    MetricSummary,
    ParameterMetrics,
    ReplicationRecord,
    SimulationCondition,
    SimulationTruth,
    condition_grid,
    generate_dataset,
    generate_factors,
    generate_schedules,
    improper_tally,
    metrics,
    run_condition,
    run_replication,
    summarize_metrics,
)

__all__ = [name for name in dir() if not name.startswith("_")]
