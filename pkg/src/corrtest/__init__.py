"""Homogeneity tests for combined unilateral and bilateral binary data under Rosner's model."""
from .estimator import RosnerHomogeneity
from .exceptions import (
    CorrTestError,
    DataError,
    DegenerateData,
    DomainError,
    EmptyGroup,
    EmptyStudy,
    InfeasibleParams,
    NegativeCount,
    NoConvergence,
    NoInteriorRoot,
    NumericalFailure,
    ParseError,
    RNotEstimable,
    SimplifiedFormMismatch,
    SingularInformation,
)
from .inference import (
    InfoMatrix,
    TestMethod,
    TestResult,
    chi_square_sf,
    donner_adjusted_test,
    information_inverse,
    information_matrix,
    lr_test,
    pairwise_wald,
    run_tests,
    score_test,
    wald_test,
)
from .mle import (
    FitMethod,
    MleFit,
    constrained_mle,
    quartic_coefficients,
    score_gradient,
    solve_pi_given_R,
    unconstrained_mle,
)
from .model import (
    CellProbabilities,
    GroupCounts,
    ModelParams,
    R_from,
    StudyData,
    cell_probabilities,
    log_likelihood,
    rho_from,
    validate_study,
)
from .simulation import (
    SimConfig,
    SimReport,
    estimate_power,
    estimate_type_I_error,
    generate_study,
    sweep_uniform,
)

__version__ = "0.1.0"
