"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .check import directional_grad_check, grad_check
from .conv import conv2d, conv3d, transposed_conv2d
from .ops import (
    add,
    channel_affine,
    clamp,
    concat,
    concat_channels,
    div,
    fully_connected,
    global_max_pool,
    hadamard,
    log,
    matmul,
    max_axis,
    mean_all,
    mean_axis,
    mul,
    pad_edge,
    permute,
    pointwise,
    relu,
    reshape,
    resize_bilinear,
    scale_channels,
    scale_spatial,
    sigmoid,
    softmax,
    softmax_axis,
    sub,
    sum_all,
    transpose,
    upsample2x,
    upsample_to,
)
from .optim import AdamState, NonFiniteGradientError, adam_step
from .tensor import GradientTape, ShapeError, TapeError, Tensor, active_tape, backward

__all__ = [name for name in dir() if not name.startswith("_")]
