"""Mediation pathway selection with a latent-factor proxy for unmeasured
mediator-outcome confounding.

The public surface follows the pipeline order: data containers and
validation (:mod:`core_types`), the mediator regression
(:mod:`mediator_model`), factor analysis of its residuals
(:mod:`factor_model`), proxy construction (:mod:`proxy`), the partially
penalized outcome fit (:mod:`penalized`), inference and pathway selection
(:mod:`inference`), and the replication harness (:mod:`simulation`).
"""

from .core_types import (
    ConvergenceError,
    Dataset,
    IdentificationError,
    OutcomeParams,
    ParameterVectorNu,
    ValidationError,
    standardize_columns,
    validate_dataset,
)
from .factor_model import (
    FactorFit,
    check_condition_i,
    fit_factor,
    fix_rotation,
    select_num_factors,
)
from .inference import (
    SandwichResult,
    SelectionReport,
    adjust_pvalues,
    estimate_nie,
    estimate_sandwich,
    evaluate_q,
    select_active_pathways,
    test_nde,
)
from .mediator_model import (
    BasisSpec,
    BasisTerm,
    MediatorFit,
    build_design,
    fit_mediator_model,
    lambda_hat,
    register_custom_term,
    test_lambda,
)
from .penalized import (
    OutcomeFit,
    PenaltySpec,
    adaptive_weights,
    cross_validate,
    fit_cv,
    fit_partial_lasso,
    kkt_check,
    solver_backend,
)
from .pipeline import PipelineConfig, PipelineResult, fit_naive, run_pipeline
from .proxy import ProxyResult, check_condition_ii, compute_delta, compute_proxy
from .simulation import (
    DgpParams,
    MetricsRow,
    SimConfig,
    SimTruth,
    draw_dataset,
    generate,
    metrics,
    run_replications,
)

__version__ = "0.1.0"
