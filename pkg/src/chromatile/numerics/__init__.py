"""Minimal reverse-mode automatic differentiation on numpy arrays.

``tensor`` holds the Tensor/Tape machinery, ``ops`` the differentiable
operations, ``params`` named parameter collections and the SGD update.
"""

from chromatile.numerics.tensor import Gradients, Tape, Tensor
from chromatile.numerics import ops
from chromatile.numerics.ops import (
    BatchNormState,
    abs_,
    add,
    batch_norm2d,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    linear,
    matmul,
    max_pool2d,
    mean_,
    mul,
    relu,
    reshape,
    sigmoid,
    sigmoid_array,
    softplus,
    sub,
    sum_,
    upsample_nearest,
)
from chromatile.numerics.params import ParameterSet, sgd_step

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ops",
    "BatchNormState",
    "ParameterSet",
    "sgd_step",
    "abs_",
    "add",
    "batch_norm2d",
    "conv2d",
    "conv_transpose2d",
    "global_avg_pool",
    "linear",
    "matmul",
    "max_pool2d",
    "mean_",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "sigmoid_array",
    "softplus",
    "sub",
    "sum_",
    "upsample_nearest",
]
