"""Minimal NCHW tensor runtime: reverse-mode autodiff, convolutions, Adam."""
from . import core as F
from .conv import causal_mask, conv2d, conv2d_transpose, masked_conv2d
from .core import (
    ComputeGraph,
    NonFiniteError,
    Tensor,
    abs,
    add,
    backward,
    broadcast_to,
    clamp,
    concat,
    div,
    exp,
    leaky_relu,
    log,
    log2,
    matmul,
    mean,
    mul,
    no_grad,
    normal_cdf,
    power,
    relu,
    reshape,
    sigmoid,
    softplus,
    split,
    sub,
    tanh,
    transpose,
    tsum,
)
from .nn import Conv2d, ConvTranspose2d, LeakyReLU, MaskedConv2d, Module, Sequential
from .optim import Adam, AdamState, adam_step

__all__ = [name for name in dir() if not name.startswith("_")]
