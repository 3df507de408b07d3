"""Multifidelity sequential tempered MCMC for stochastic reaction networks."""

from .estimator import MultifidelitySampler
from .fsp import CapacityError, StateSpace, build_rectangle_space, solve_cme_adaptive
from .integrate import IntegratorConfig, expm_multiply_krylov, step_implicit
from .likelihood import (
    CMELikelihood,
    FunctionLikelihood,
    ModelHierarchy,
    SnapshotDataset,
    full_log_likelihood,
    surrogate_log_likelihood,
)
from .multifi import BridgingStrategy, run_multifidelity
from .network import PriorSpec, ReactionNetwork, log_prior
from .stmcmc import SamplerConfig, run_fixed_fidelity

__version__ = "0.1.0"

__all__ = [
    "BridgingStrategy",
    "CMELikelihood",
    "CapacityError",
    "FunctionLikelihood",
    "IntegratorConfig",
    "ModelHierarchy",
    "MultifidelitySampler",
    "PriorSpec",
    "ReactionNetwork",
    "SamplerConfig",
    "SnapshotDataset",
    "StateSpace",
    "build_rectangle_space",
    "expm_multiply_krylov",
    "full_log_likelihood",
    "log_prior",
    "run_fixed_fidelity",
    "run_multifidelity",
    "solve_cme_adaptive",
    "step_implicit",
    "surrogate_log_likelihood",
]
