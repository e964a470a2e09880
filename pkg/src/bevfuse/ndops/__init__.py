"""Minimal dense-array kernel with reverse-mode differentiation."""

from . import functional
from .io import read_points, read_tensor, write_points, write_tensor
from .nn import BatchNorm2d, Conv2d, Linear, Module, kaiming_uniform
from .tensor import (
    NumericalError,
    Parameter,
    Tensor,
    accumulate_grad,
    debug_checks,
    default_dtype,
    grad_enabled,
    make_op,
    no_grad,
    set_debug_checks,
    set_default_dtype,
)

__all__ = [
    "functional",
    "Tensor",
    "Parameter",
    "NumericalError",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "debug_checks",
    "no_grad",
    "grad_enabled",
    "make_op",
    "accumulate_grad",
    "Module",
    "Conv2d",
    "BatchNorm2d",
    "Linear",
    "kaiming_uniform",
    "write_tensor",
    "read_tensor",
    "write_points",
    "read_points",
]
