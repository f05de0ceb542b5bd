"""Sparse Bayesian factor analysis with dependent Gaussian-process factors.

Latent factor trajectories share a kernel-convolution covariance whose
hyperparameters are estimated by Monte Carlo EM; everything else is
sampled by a blocked Gibbs sampler.
"""

from .data import Dataset
from .gibbs import ChainResult, Hyperparams, ModelState, run_chain
from .kcf import CovMatrix, DgpParams, build_sigma_y, factor_correlation
from .mcem import McemConfig, run_mcem
from .mle import SampleBank, dgp_loglik, fit_mle
from .pipeline import FitConfig, FitResult, evaluate, fit_model
from .simulate import ScenarioSpec, simulate, split_train_test

__version__ = "0.1.0"

__all__ = [
    "ChainResult",
    "CovMatrix",
    "Dataset",
    "DgpParams",
    "FitConfig",
    "FitResult",
    "Hyperparams",
    "McemConfig",
    "ModelState",
    "SampleBank",
    "ScenarioSpec",
    "build_sigma_y",
    "dgp_loglik",
    "evaluate",
    "factor_correlation",
    "fit_mle",
    "fit_model",
    "run_chain",
    "run_mcem",
    "simulate",
    "split_train_test",
]
