"""Minimal deterministic numeric kernel used by the trajectory model."""
from .gaussian import GaussianParams, bvn_mean, bvn_nll, bvn_sample, gaussian_head
from .layers import LSTMCellParams, dropout, embed_relu, linear_sigmoid, lstm_step, sigmoid
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import (
    Parameter,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    mul,
    no_grad,
    put_rows,
    take_rows,
    total,
)

__all__ = [
    "AdamState", "GaussianParams", "LSTMCellParams", "Parameter", "Tensor",
    "adam_step", "add", "as_tensor", "backward", "bvn_mean", "bvn_nll", "bvn_sample",
    "clip_global_norm", "concat", "dropout", "embed_relu", "gaussian_head",
    "linear_sigmoid", "lstm_step", "mul", "no_grad", "put_rows", "sigmoid",
    "take_rows", "total",
]
