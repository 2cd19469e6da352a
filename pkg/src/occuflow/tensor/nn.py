"""Parameter containers and the handful of layers the world model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Tensor, silu


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Module:
    """Attribute-registered tree of parameters.

    Parameters are ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. Registration order is attribute
    assignment order, which makes parameter names and ordering deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
        self.weight = zeros_param((n_out, n_in)) if zero else uniform_init(rng, (n_out, n_in), n_in)
        self.bias = zeros_param((n_out,))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv2d(Module):
    """Channels-last 2-d convolution ``[B, H, W, C]``."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, zero: bool = False):
        shape = (c_out, c_in, k, k)
        self.weight = zeros_param(shape) if zero else uniform_init(rng, shape, c_in * k * k)
        self.bias = zeros_param((c_out,))
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d_cl(x, self.weight, self.bias, padding=self.padding)


class Conv3d(Module):
    """Channels-last 3-d convolution ``[B, T, H, W, C]``."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, zero: bool = False):
        shape = (c_out, c_in, k, k, k)
        self.weight = zeros_param(shape) if zero else uniform_init(rng, shape, c_in * k**3)
        self.bias = zeros_param((c_out,))
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d_cl(x, self.weight, self.bias, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        if channels % groups:
            raise F.ShapeError(f"{groups} groups do not divide {channels} channels")
        self.gamma = ones_param((channels,))
        self.beta = zeros_param((channels,))
        self.groups = groups
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm_cl(x, self.groups, self.gamma, self.beta, self.eps)


class ConvGNSiLU(Module):
    """3x3 conv, group norm, SiLU on ``[B, H, W, C]``."""

    def __init__(self, rng, c_in: int, c_out: int, groups: int):
        self.conv = Conv2d(rng, c_in, c_out, 3)
        self.norm = GroupNorm(groups, c_out)

    def forward(self, x: Tensor) -> Tensor:
        return silu(self.norm(self.conv(x)))
