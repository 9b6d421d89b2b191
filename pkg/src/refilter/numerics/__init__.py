"""Differentiable-tensor substrate: autodiff core, optimizer, grad checks."""

from .gradcheck import GradCheckEntry, GradCheckReport, finite_diff_check
from .optim import AdamW, Parameter, clip_grad_norm, set_trainable, zero_grads
from .tensor import (
    SIGMOID_CLAMP,
    Tensor,
    as_tensor,
    concat,
    cross_entropy,
    dropout,
    embedding,
    exp,
    gather_positions,
    gelu,
    grad_enabled,
    layer_norm,
    log,
    matmul,
    mean_tensor,
    mul,
    no_grad,
    relu,
    reshape,
    scatter_positions,
    sigmoid,
    softmax,
    sorted_sum,
    sum_tensor,
    tanh,
    transpose,
)

__all__ = [
    "AdamW",
    "GradCheckEntry",
    "GradCheckReport",
    "Parameter",
    "SIGMOID_CLAMP",
    "Tensor",
    "as_tensor",
    "clip_grad_norm",
    "concat",
    "cross_entropy",
    "dropout",
    "embedding",
    "exp",
    "finite_diff_check",
    "gather_positions",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "log",
    "matmul",
    "mean_tensor",
    "mul",
    "no_grad",
    "relu",
    "reshape",
    "scatter_positions",
    "set_trainable",
    "sigmoid",
    "softmax",
    "sorted_sum",
    "sum_tensor",
    "tanh",
    "transpose",
    "zero_grads",
]
