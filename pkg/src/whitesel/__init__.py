"""Variable selection in the multivariate linear model with residual whitening.

The pipeline has three stages: per-column ANOVA residual estimation
(:mod:`whitesel.linmodel`), residual row-covariance estimation and whitening
(:mod:`whitesel.whitening`), and a whitened vectorized Lasso with
cross-validation and stability selection (:mod:`whitesel.selection`).
A simulation harness lives in :mod:`whitesel.simulate` and a batch CLI in
:mod:`whitesel.cli`.
"""

__version__ = "0.1.0"

from whitesel.linmodel import FactorLabels, build_design, fit_anova, standardize
from whitesel.whitening import (
    Ar1Fit,
    CholeskyError,
    WhiteningOperator,
    WhitenessTestResult,
    apply_whitening,
    ar1_inverse_sqrt,
    chi_squared_survival,
    fit_ar1,
    identity_operator,
    nonparam_inverse_sqrt,
    pooled_autocovariance,
    portmanteau_test,
    select_whitening,
)
from whitesel.selection import (
    ConvergenceError,
    LassoSolution,
    StabilityReport,
    ThresholdChoice,
    VectorizedProblem,
    choose_threshold,
    cross_validate_lambda,
    kronecker_matvec,
    lambda_max,
    lasso_solve,
    stability_select,
    vectorize,
)

__all__ = [
    "FactorLabels",
    "build_design",
    "standardize",
    "fit_anova",
    "Ar1Fit",
    "WhiteningOperator",
    "WhitenessTestResult",
    "CholeskyError",
    "pooled_autocovariance",
    "fit_ar1",
    "ar1_inverse_sqrt",
    "nonparam_inverse_sqrt",
    "identity_operator",
    "apply_whitening",
    "portmanteau_test",
    "chi_squared_survival",
    "select_whitening",
    "VectorizedProblem",
    "LassoSolution",
    "StabilityReport",
    "ThresholdChoice",
    "ConvergenceError",
    "vectorize",
    "kronecker_matvec",
    "lambda_max",
    "lasso_solve",
    "cross_validate_lambda",
    "stability_select",
    "choose_threshold",
]
