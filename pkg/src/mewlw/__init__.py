"""Marginal Cox (WLW) estimation for multiple failure types when the
outcomes are misclassified self-reports.

The estimators reweight every questionnaire time by the probability that
the true event occurred there, with the probabilities supplied by pooled
logistic measurement-error models fitted in a validation study.  Joint
sandwich covariances propagate the error-model uncertainty, for both
external and internal validation designs, and a Monte Carlo harness
reproduces the operating characteristics (bias, coverage) at desk scale.
"""

from .cox import CommonEffect, common_effect, cox_fit, fit_wlw, partial_likelihood, score_residuals
from .data import (
    EventArrays,
    QuestionnaireGrid,
    StudyDataset,
    SubjectRecord,
    ValidationReport,
    check_dataset,
    load_study,
    write_study,
)
from .exceptions import (
    ConvergenceError,
    DataError,
    DegenerateProblemError,
    MewlwError,
    SeparationError,
)
from .inference import (
    CorrectedResult,
    JointCovariance,
    PooledResult,
    WaldTest,
    beta_gamma_jacobian,
    evs_joint_cov,
    fit_evs,
    fit_ivs_full,
    fit_ivs_pooled,
    phi_tilde_star,
    pool_estimates,
    wald_equal_effects,
)
from .me_model import (
    MeModelFit,
    MeModelSpec,
    PersonTimeTable,
    expand_person_time,
    fit_me_models,
    fit_pooled_logistic,
    me_joint_cov,
    me_scores,
)
from .results import FitResult
from .sim import (
    SimConfig,
    SimulationResult,
    gen_self_report,
    generate_study,
    gumbel_cdf,
    gumbel_sample,
    run_replicate,
    run_simulation,
    sens_spec_to_alpha,
    summarize,
)
from .weighted import (
    score_jacobian,
    solve_weighted,
    weighted_score_breslow,
    weighted_score_efron,
)
from .weights import (
    WeightTable,
    build_weight_table,
    degenerate_weights,
    hazard_prob,
)

__version__ = "0.1.0"
