from .backends import BACKEND, available_backends, load_backend
from .gradcheck import GradCheckError, grad_check
from .ops import (
    add,
    astensor,
    concat,
    concat_time,
    cross_entropy,
    embedding,
    gelu,
    layer_mix,
    layer_norm,
    matmul,
    mean_all,
    mul,
    narrow,
    nonlinearity,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_all,
    transpose,
    weighted_sum,
)
from .tensor import ShapeError, Tape, Tensor, active_tape, parameter

__all__ = [
    "BACKEND",
    "GradCheckError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "astensor",
    "available_backends",
    "concat",
    "concat_time",
    "cross_entropy",
    "embedding",
    "gelu",
    "grad_check",
    "layer_mix",
    "layer_norm",
    "load_backend",
    "matmul",
    "mean_all",
    "mul",
    "narrow",
    "nonlinearity",
    "parameter",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sub",
    "sum_all",
    "transpose",
    "weighted_sum",
]
