"""Reverse-mode autodiff core: tensors, tape, primitives, Adam, checkpoints."""

from .checkpoint import load_arrays, load_into, save_arrays, save_tensors
from .gradcheck import grad_check
from .ops import (
    PRIMITIVES,
    BatchNormParams,
    add,
    affine,
    as_tensor,
    batchnorm,
    concat,
    cosine,
    cross_entropy_with_softmax,
    div,
    dot,
    gather_rows,
    l1_loss,
    l2norm,
    lstm_sequence,
    matmul,
    mean,
    mean_of,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    split,
    stack_rows,
    sub,
    tanh,
)
from .optim import OptimState, adam_step, collect, start_epoch, step_tensors
from .tensor import Tape, Tensor, active_tape, backward, zero_grad

__all__ = [
    "PRIMITIVES",
    "BatchNormParams",
    "OptimState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "batchnorm",
    "collect",
    "concat",
    "cosine",
    "cross_entropy_with_softmax",
    "div",
    "dot",
    "gather_rows",
    "grad_check",
    "l1_loss",
    "l2norm",
    "load_arrays",
    "load_into",
    "lstm_sequence",
    "matmul",
    "mean",
    "mean_of",
    "mul",
    "relu",
    "reshape",
    "save_arrays",
    "save_tensors",
    "scale",
    "sigmoid",
    "softmax",
    "split",
    "stack_rows",
    "start_epoch",
    "step_tensors",
    "sub",
    "tanh",
    "zero_grad",
]
