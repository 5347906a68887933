"""Multilevel Monte Carlo gradient methods over biased stochastic oracles.

The package is organized around one contract: a `BiasedOracle` answers
coupled gradient queries (h^l, H^l) whose bias, variance, and cost follow
declared geometric laws in the level l. Everything else composes on top:

  estimators  five ways to spend queries (single-level, batched telescope,
              randomized truncation, and two unbiased randomizations)
  optimizers  SGD / variance-reduced SGD loops plus the hyper-parameter
              planners (levels, batch sizes, step sizes, iteration counts)
  problems    four instances: composition toys with closed forms, smoothed
              DRO regression, queue pricing/staffing, shortfall risk
  bench       rate probes, budgeted sweeps, paired comparisons, grid search
  cli         `mlmc-grad` command wrapping the bench harness
"""

from .errors import (
    BudgetOverflowError,
    ConfigError,
    DivergenceError,
    InapplicableEstimatorError,
    InsufficientDataError,
    InvalidInputError,
    LevelOverflowError,
    MlmcGradError,
    NumericError,
    UnstableRegimeError,
    exit_code_for,
)
from .oracle import BiasedOracle, CostMeter, OracleOutput, QueryBatch, RateLaw
from .estimators import (
    ESTIMATOR_KINDS,
    GeometricLevelLaw,
    GradientEstimate,
    EstimateBatch,
    GradientEstimator,
    LsgdEstimator,
    RrmlmcEstimator,
    RtmlmcEstimator,
    RumlmcEstimator,
    VmlmcEstimator,
    batch_sizes,
    make_estimator,
    r_sum,
    r_sum_inf,
    truncated_level_law,
)
from .optimizers import (
    GradNormEstimate,
    RunResult,
    StepSchedule,
    grad_norm_probe,
    iteration_count,
    make_schedule,
    pilot_variance,
    select_level,
    sgd,
    vmlmc_batch_scale,
    vr_sgd,
)
from .problems import (
    CsoInstance,
    QueueInstance,
    SinkhornInstance,
    UbsrInstance,
    cso_linear,
    cso_nonconvex,
    cso_toy,
    make_instance,
    queue_f2,
    ubsr_toy,
)
from .rng import cell_rng, run_rng

__version__ = "0.1.0"

__all__ = [
    "MlmcGradError",
    "ConfigError",
    "DivergenceError",
    "InapplicableEstimatorError",
    "BudgetOverflowError",
    "LevelOverflowError",
    "UnstableRegimeError",
    "InvalidInputError",
    "NumericError",
    "InsufficientDataError",
    "exit_code_for",
    "RateLaw",
    "OracleOutput",
    "QueryBatch",
    "BiasedOracle",
    "CostMeter",
    "r_sum",
    "r_sum_inf",
    "truncated_level_law",
    "GeometricLevelLaw",
    "batch_sizes",
    "GradientEstimate",
    "EstimateBatch",
    "GradientEstimator",
    "LsgdEstimator",
    "VmlmcEstimator",
    "RtmlmcEstimator",
    "RumlmcEstimator",
    "RrmlmcEstimator",
    "make_estimator",
    "ESTIMATOR_KINDS",
    "StepSchedule",
    "make_schedule",
    "select_level",
    "vmlmc_batch_scale",
    "iteration_count",
    "pilot_variance",
    "GradNormEstimate",
    "grad_norm_probe",
    "RunResult",
    "sgd",
    "vr_sgd",
    "CsoInstance",
    "cso_toy",
    "cso_linear",
    "cso_nonconvex",
    "SinkhornInstance",
    "QueueInstance",
    "queue_f2",
    "UbsrInstance",
    "ubsr_toy",
    "make_instance",
    "run_rng",
    "cell_rng",
    "__version__",
]
