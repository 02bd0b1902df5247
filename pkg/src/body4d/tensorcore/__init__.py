"""Minimal reverse-mode differentiable computation core."""

from .optim import AdamState, adam_init, adam_update
from .rnn import GateWeights, gru_cell, init_gate_weights, stacked_gru
from .tensor import (
    ShapeMismatch, Tensor, add, as_tensor, backward, concat, custom, gather,
    matmul, mul, narrow, neg, no_grad, parameter, relu, reshape,
    set_debug_checks, sigmoid, sqrt, stack, sub, tabs, tanh, tensor, tmax,
    tmean, tsum, transpose,
)

__all__ = [
    "Tensor", "ShapeMismatch", "tensor", "parameter", "as_tensor", "no_grad",
    "set_debug_checks", "backward", "add", "sub", "mul", "neg", "matmul",
    "tsum", "tmean", "tmax", "relu", "tanh", "sigmoid", "tabs", "sqrt",
    "reshape", "transpose", "concat", "narrow", "gather", "stack", "custom",
    "GateWeights", "init_gate_weights", "gru_cell", "stacked_gru",
    "AdamState", "adam_init", "adam_update",
]
