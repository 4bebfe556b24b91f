"""Minimal dense tensor engine with reverse-mode autodiff."""

from sfnet.autodiff.ops import batchnorm2d, conv2d, maxpool2d, pool_global
from sfnet.autodiff.tensor import (
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    crop,
    default_dtype,
    elementwise,
    get_default_dtype,
    is_grad_enabled,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pad,
    record,
    relu,
    reshape,
    scale,
    select,
    sigmoid,
    stack,
    sub,
    sum_,
    transpose,
    unbroadcast,
)

__all__ = [
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "batchnorm2d",
    "concat",
    "conv2d",
    "crop",
    "default_dtype",
    "elementwise",
    "get_default_dtype",
    "is_grad_enabled",
    "matmul",
    "maxpool2d",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "pad",
    "pool_global",
    "record",
    "relu",
    "reshape",
    "scale",
    "select",
    "sigmoid",
    "stack",
    "sub",
    "sum_",
    "transpose",
    "unbroadcast",
]
