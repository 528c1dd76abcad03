"""Latent-variable multiple imputation for mixed continuous, binary and ordinal data.

The imputation model links responses to latent factors ``eta`` and response
indicators to latent factors ``xi``, with ``xi`` allowed to depend on ``eta``
so that missingness can be non-ignorable given the observed data.  Parameters
are fitted by stochastic approximation over a Polya-Gamma Gibbs sampler,
imputations are drawn at the fitted parameters, and downstream estimating
equations get a sandwich variance that accounts for imputation-model
uncertainty.
"""
from .analysis import (AnalysisResult, EstimatingFunction, analyze, builtin_conditional_mean,
                       builtin_correlation, builtin_linear_regression, builtin_mean)
from .data import Dataset, validate
from .fit import FitResult, NumericError, SAConfig, fit
from .impute import ImputationOutput, ImputeConfig, impute
from .model import Kind, ModelError, ModelSpec, Psi, VariableSpec
from .selection import (count_free_params, estimate_observed_loglik, lr_test_ignorability,
                        select_dimensions)

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult", "Dataset", "EstimatingFunction", "FitResult", "ImputationOutput",
    "ImputeConfig", "Kind", "ModelError", "ModelSpec", "NumericError", "Psi", "SAConfig",
    "VariableSpec", "analyze", "builtin_conditional_mean", "builtin_correlation",
    "builtin_linear_regression", "builtin_mean", "count_free_params",
    "estimate_observed_loglik", "fit", "impute", "lr_test_ignorability", "select_dimensions",
    "validate",
]
