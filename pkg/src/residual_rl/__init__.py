"""Residuals-based offline reinforcement learning.

Fit a transition model on logged data, keep its empirical residuals, and use
prediction-plus-residual kernels both for exact fixed-point computation on
grids and for offline deep Q-learning in simulated rollouts.
"""

__version__ = "0.1.0"

from .envs import (
    OfflineDataset,
    StochasticCartPole,
    Synthetic1D,
    generate_dataset,
    make_env,
)
from .errors import (
    ConfigError,
    EmptySupportError,
    NanGradientError,
    NonConvergenceError,
    NumericBlowupError,
    ResidualRLError,
    SingularDesignError,
    StateOutOfBoundsError,
)
from .mdp import (
    ActionSet,
    DiscountedProblem,
    QFunction,
    StateSpace,
    greedy_policy,
    scenario_bellman_apply,
    sup_norm_distance,
    value_iterate,
)
from .residuals import (
    EmpiricalKernel,
    ResidualSet,
    TransitionModel,
    compute_residuals,
    fit_transition_model,
    full_information_kernel,
    project,
    true_noise_residuals,
)

__all__ = [
    "ActionSet",
    "ConfigError",
    "DiscountedProblem",
    "EmpiricalKernel",
    "EmptySupportError",
    "NanGradientError",
    "NonConvergenceError",
    "NumericBlowupError",
    "OfflineDataset",
    "QFunction",
    "ResidualRLError",
    "ResidualSet",
    "SingularDesignError",
    "StateOutOfBoundsError",
    "StateSpace",
    "StochasticCartPole",
    "Synthetic1D",
    "TransitionModel",
    "compute_residuals",
    "fit_transition_model",
    "full_information_kernel",
    "generate_dataset",
    "greedy_policy",
    "make_env",
    "project",
    "scenario_bellman_apply",
    "sup_norm_distance",
    "true_noise_residuals",
    "value_iterate",
    "__version__",
]
