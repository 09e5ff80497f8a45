"""Data assimilation with hierarchical Gaussian priors.

Non-centred fields ``m = m_pr + L(theta) z`` with uncertain covariance
hyperparameters, sampled by randomized maximum likelihood, an iterative
ensemble smoother, or the hybrid smoother that combines an ensemble
estimate of ``dg/dm`` with the analytic ``dm/dx``.
"""

from .covariance import AnisoParams, CovOperator, KernelFamily, assemble_Mx, build_L
from .field_model import Field, GridSpec, HyperParams, StateLayout, pack, unpack
from .priors import HyperPrior, sample_prior_ensemble
from .smoothers import LocalizationSpec, SamplerConfig, run_sampler

__version__ = "0.1.0"

__all__ = [
    "AnisoParams",
    "CovOperator",
    "KernelFamily",
    "assemble_Mx",
    "build_L",
    "Field",
    "GridSpec",
    "HyperParams",
    "StateLayout",
    "pack",
    "unpack",
    "HyperPrior",
    "sample_prior_ensemble",
    "LocalizationSpec",
    "SamplerConfig",
    "run_sampler",
    "__version__",
]
