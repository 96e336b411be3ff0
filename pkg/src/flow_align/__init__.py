"""Toy-scale flow-matching generation and alignment (DPO, GRPO, single-trajectory RL)."""

from .errors import (
    ConfigurationError,
    ContractError,
    DependencyError,
    DivergenceError,
    DomainError,
    FlowAlignError,
    NumericInputError,
    UndefinedKernelError,
)
from .net import NetworkSpec, OptimizerState, VelocityNet, adamw_step, average_params, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ContractError", "DependencyError", "DivergenceError", "DomainError",
    "FlowAlignError", "NumericInputError", "UndefinedKernelError",
    "NetworkSpec", "OptimizerState", "VelocityNet", "adamw_step", "average_params",
    "load_checkpoint", "save_checkpoint",
]
