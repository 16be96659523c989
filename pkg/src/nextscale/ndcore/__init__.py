"""Minimal reverse-mode autodiff substrate: numpy-backed tensors, a
define-by-run tape, deterministic counter-based RNG, a named parameter
store, and a finite-difference gradient checker.

The graph is rebuilt on every forward pass. Tensors are immutable after
recording except for their ``grad`` buffers.
"""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    constant,
    gelu,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    sigmoid,
    softmax,
    squared_error,
    take_last_axis,
    tensor_sum,
)
from .params import ParamStore
from .rng import Rng
from .gradcheck import finite_diff_check

__all__ = [
    "ShapeError",
    "Tensor",
    "ParamStore",
    "Rng",
    "add",
    "concat",
    "constant",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "log_softmax",
    "masked_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "sigmoid",
    "softmax",
    "squared_error",
    "take_last_axis",
    "tensor_sum",
]
