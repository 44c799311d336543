"""Variance-reduced optimizers for K-level compositional problems and a
lab for measuring their stability and generalization."""

from .errors import (
    ConfigurationError,
    InvalidInputError,
    KLevelError,
    NumericError,
    OracleNotConvergedError,
    RunError,
)
from .estimators import (
    EstimatorChain,
    cover_update,
    init_chain,
    project_ball,
    storm_update,
    svmr_step,
)
from .optimizers import (
    LAST,
    UNIFORM,
    AveragingMode,
    RunRecord,
    Schedule,
    average,
    run_cover,
    run_sgd,
    run_storm,
    run_svmr,
    schedule_convex,
    schedule_strongly_convex,
)
from .problem import (
    CompositionalProblem,
    Dataset,
    ProblemConstants,
    empirical_gradient,
    empirical_value,
    finite_difference_gradient,
    make_klevel_synthetic,
    make_quadratic_problem,
    make_quintic_problem,
    neighbor,
    population_value,
)

from .stability import (
    BoundInputs,
    StabilityConfig,
    StabilityEstimate,
    coupled_stability,
    estimate_variance_constants,
    generalization_bound,
    generalization_gap,
    level_variance,
    optimization_error,
    reference_minimizer,
)

__version__ = "0.1.0"
