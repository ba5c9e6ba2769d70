"""Mixed models with reduced-rank multivariate random effects.

rrglmm fits generalized linear mixed models whose multivariate random
effects may carry a factor-analytic (reduced-rank) covariance, by
maximizing a Laplace-approximated marginal likelihood.  It provides a
formula mini-language (``y ~ x + rr(x | group, 2)``), residual-based
starting values with jittered multi-start, delta-method standard errors,
variance-component reports, ordination exports, parametric-bootstrap
likelihood-ratio tests, and rank sweeps.
"""

from .covstruct import (
    CovarianceStructure,
    LoadingMatrix,
    cov_to_sd_corr,
    loading_to_cov,
    loading_to_theta,
    num_params,
    theta_to_cov,
    theta_to_loading,
)
from .data import DataError, DataTable
from .families import (
    Family,
    Link,
    canonical_link,
    deviance_residual,
    get_family,
    log_density,
    neg_loglik_derivs,
    quantile_residual,
    simulate_response,
)
from .fitting import (
    FitControl,
    FitError,
    FitResult,
    fd_gradient,
    fit,
    fit_model,
    glm_start_residuals,
    irls_glm,
    jitter_latents,
    outer_minimize,
    start_values,
)
from .formula import (
    FormulaError,
    ModelSpec,
    RandomTerm,
    TermExpr,
    build_design,
    parse_formula,
)
from .inference import (
    BootstrapResult,
    InformationCriteria,
    Ordination,
    RankSweepRow,
    VarCorrReport,
    bootstrap_lrt,
    bootstrap_pvalue,
    conditional_effects,
    delta_se,
    fixed_effect_table,
    information_criteria,
    observed_information,
    ordination,
    param_covariance,
    rank_sweep,
    simulate_fit,
    simulate_from_params,
    var_corr,
)
from .laplace import (
    InnerNewtonError,
    JointModel,
    LatentState,
    ParamVector,
    build_joint_model,
    inner_newton,
    joint_neg_logdensity,
    laplace_nll,
    linear_predictor,
    logdet_psd,
)

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult",
    "CovarianceStructure",
    "DataError",
    "DataTable",
    "Family",
    "FitControl",
    "FitError",
    "FitResult",
    "FormulaError",
    "InformationCriteria",
    "InnerNewtonError",
    "JointModel",
    "LatentState",
    "Link",
    "LoadingMatrix",
    "ModelSpec",
    "Ordination",
    "ParamVector",
    "RandomTerm",
    "RankSweepRow",
    "TermExpr",
    "VarCorrReport",
    "bootstrap_lrt",
    "bootstrap_pvalue",
    "build_design",
    "build_joint_model",
    "canonical_link",
    "conditional_effects",
    "cov_to_sd_corr",
    "delta_se",
    "deviance_residual",
    "fd_gradient",
    "fit",
    "fit_model",
    "fixed_effect_table",
    "get_family",
    "glm_start_residuals",
    "information_criteria",
    "inner_newton",
    "irls_glm",
    "jitter_latents",
    "joint_neg_logdensity",
    "laplace_nll",
    "linear_predictor",
    "loading_to_cov",
    "loading_to_theta",
    "log_density",
    "logdet_psd",
    "neg_loglik_derivs",
    "num_params",
    "observed_information",
    "ordination",
    "outer_minimize",
    "param_covariance",
    "parse_formula",
    "quantile_residual",
    "rank_sweep",
    "simulate_fit",
    "simulate_from_params",
    "simulate_response",
    "start_values",
    "theta_to_cov",
    "theta_to_loading",
    "var_corr",
]
