"""Numeric substrate: tensors, reverse-mode differentiation, Adam."""

from . import ops
from .autograd import (
    BackwardError,
    GradTape,
    NumericOverflowError,
    ShapeError,
    Tensor,
    backward,
    grad_enabled,
    no_grad,
)
from .gradcheck import NondeterministicFunctionError, finite_diff_check, run_primitive_suite
from .ops import apply_primitive
from .optim import LrSchedule, OptimizerState, adam_step, lr_at

__all__ = [
    "BackwardError",
    "GradTape",
    "LrSchedule",
    "NondeterministicFunctionError",
    "NumericOverflowError",
    "OptimizerState",
    "ShapeError",
    "Tensor",
    "adam_step",
    "apply_primitive",
    "backward",
    "finite_diff_check",
    "grad_enabled",
    "lr_at",
    "no_grad",
    "ops",
    "run_primitive_suite",
]
