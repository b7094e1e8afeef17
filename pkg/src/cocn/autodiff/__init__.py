"""Reverse-mode differentiation over numpy arrays."""

from . import ops
from .gradcheck import finite_difference_check
from .optim import adam_step, fan_in_uniform, zero_grad
from .surrogate import mod_shift, rank_approx_grad, sign_surrogate, stable_ranks
from .tensor import DTYPE, DimensionError, Parameter, Tape, Tensor, as_tensor, no_grad

__all__ = [
    "ops", "finite_difference_check", "adam_step", "fan_in_uniform", "zero_grad",
    "mod_shift", "rank_approx_grad", "sign_surrogate", "stable_ranks", "DTYPE",
    "DimensionError", "Parameter", "Tape", "Tensor", "as_tensor", "no_grad",
]
