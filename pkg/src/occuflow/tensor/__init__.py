"""Minimal reverse-mode autodiff engine, layers, losses and optimizer."""

from . import functional
from .autograd import (
    DTYPE,
    NumericalError,
    Tensor,
    absolute,
    add,
    as_tensor,
    concat,
    cos,
    exp,
    getitem,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    relu,
    reshape,
    set_debug,
    sigmoid,
    silu,
    sin,
    stack,
    sub,
    take,
    transpose,
    tsum,
    where,
)
from .functional import (
    ShapeError,
    conv2d,
    conv3d,
    cross_entropy,
    grid_sample,
    group_norm,
    l1_loss,
    linear,
    log_softmax,
    multi_head_attention,
    resize_bilinear,
    softmax,
)
from .gradcheck import gradcheck
from .io import load_parameters, save_parameters
from .nn import Conv2d, Conv3d, ConvGNSiLU, GroupNorm, Linear, Module
from .optim import AdamW, CyclicLR, clip_grad_norm

__all__ = [name for name in dir() if not name.startswith("_")]
