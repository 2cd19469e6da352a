"""AdamW with global-norm clipping and a triangular cyclic learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import Tensor


@dataclass
class CyclicLR:
    """Triangular policy: linear ``base_lr -> max_lr`` over the first half cycle, back down over the second."""

    base_lr: float
    max_lr: float
    cycle_length: int

    def __post_init__(self):
        if self.base_lr <= 0 or self.max_lr < self.base_lr:
            raise ValueError(f"need 0 < base_lr <= max_lr, got {self.base_lr}, {self.max_lr}")
        if self.cycle_length < 2:
            raise ValueError(f"cycle_length must be >= 2, got {self.cycle_length}")

    def __call__(self, step: int) -> float:
        phase = (step % self.cycle_length) / self.cycle_length
        tri = 1.0 - abs(2.0 * phase - 1.0)
        lr = self.base_lr + (self.max_lr - self.base_lr) * tri
        return min(max(lr, self.base_lr), self.max_lr)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


@dataclass
class AdamW:
    params: list[Tensor]
    schedule: CyclicLR
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_norm: float = 5.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.params = list(self.params)
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self) -> float:
        """Clip, then apply one decoupled-weight-decay Adam update. Returns the pre-clip grad norm."""
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"AdamW.step: {len(missing)} parameter(s) have no gradient (first index {missing[0]})")
        norm = clip_grad_norm(self.params, self.max_norm)
        lr = self.schedule(self.step_count)
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
