"""Bivariate Poisson regression with convolved-Gaussian-process priors."""

from .baselines import CDRParams, UnpairedDataError, fit_cdr, fit_indep
from .covariance import (
    CholFactor,
    MCGPCovariance,
    MCGPHyperparams,
    SingularCovarianceError,
    StackedInputs,
    assemble_K,
    assemble_K_plus,
    chol_psd,
    sample_mcgp,
)
from .diagnostics import RegretCurve, pd_audit, regret_growth, regret_term, rkhs_norm
from .inference import (
    MODEL_SPECS,
    FitError,
    FittedModel,
    ModelSpec,
    ModeConvergenceError,
    OptimOptions,
    aic,
    find_mode,
    fit,
    laplace_marginal_loglik,
)
from .kernels import (
    CovFamily,
    KernelParams,
    cov_cross_general,
    cov_cross_sqexp,
    cov_iso,
    cov_self_sqexp,
    quad_form,
)
from .likelihood import Dataset, RegressionCoefficients, phi, phi_grad_W, poisson_logpmf
from .prediction import (
    PredictionNumericsError,
    PredictionResult,
    latent_moment,
    predict_batch,
    predict_cross_cov,
    predict_mean,
    predict_point,
    predict_var,
)
from .simulation import (
    ResultsTable,
    ScenarioConfig,
    error_rate,
    gen_scenario1,
    gen_scenario2,
    rmse,
    run_replications,
)

__version__ = "0.1.0"
