"""Learning wireless resource allocation policies in the Lagrangian dual domain.

The package trains small neural network policies to maximize ergodic network
utilities under average-performance constraints, using model-free primal-dual
updates: utilities and rates are only ever observed, never differentiated
analytically. Verification tools solve tiny instances by brute force and
bound the duality gap introduced by the policy parameterization.
"""

from .baselines import (
    AwgnDualResult,
    equal_power_policy,
    exact_awgn_dual_sgd,
    random_k_policy,
    wmmse_solve,
)
from .estimators import FdConfig, fd_grad_g0, fd_jacobian_g, fd_policy_jacobian, policy_gradient
from .mlp import MlpArchitecture, PolicyModel, SisoBank, load_model, save_model
from .problem import (
    ChannelSampler,
    ContractError,
    DualIterates,
    ProblemSpec,
    estimate_expected_f,
    evaluate_lagrangian,
    project_box,
    project_nonneg,
)
from .problems import AwgnConfig, InterferenceConfig, build_awgn, build_interference
from .trainer import MetricRecord, TrainerConfig, TrainerState, train
from .verify import (
    DualityGapReport,
    brute_force_primal,
    check_sandwich,
    lambda_norm_bound,
    normalized_gap,
    surrogate_sandwich,
)

__version__ = "0.1.0"

__all__ = [
    "AwgnConfig",
    "AwgnDualResult",
    "ChannelSampler",
    "ContractError",
    "DualIterates",
    "DualityGapReport",
    "FdConfig",
    "InterferenceConfig",
    "MetricRecord",
    "MlpArchitecture",
    "PolicyModel",
    "ProblemSpec",
    "SisoBank",
    "TrainerConfig",
    "TrainerState",
    "brute_force_primal",
    "build_awgn",
    "build_interference",
    "check_sandwich",
    "equal_power_policy",
    "estimate_expected_f",
    "evaluate_lagrangian",
    "exact_awgn_dual_sgd",
    "fd_grad_g0",
    "fd_jacobian_g",
    "fd_policy_jacobian",
    "lambda_norm_bound",
    "load_model",
    "normalized_gap",
    "policy_gradient",
    "project_box",
    "project_nonneg",
    "random_k_policy",
    "save_model",
    "surrogate_sandwich",
    "train",
    "wmmse_solve",
]
