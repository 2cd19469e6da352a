"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    seed: int = 0,
    max_entries: int | None = None,
) -> float:
    """Worst relative error between analytic and numeric gradients of ``fn``.

    Non-scalar outputs are contracted with a fixed random cotangent so the
    whole Jacobian participates. ``max_entries`` caps the number of perturbed
    coordinates per input (sampled without replacement). The relative error of
    an input is ``||analytic - numeric|| / max(||analytic||, ||numeric||)``.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    cot = rng.standard_normal(out.shape)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * cot))

    for t in inputs:
        t.grad = None
    out.backward(cot)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar()
            flat[i] = orig - eps
            fm = scalar()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * eps)
        ana = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        err = float(np.linalg.norm(ana - num) / denom)
        if np.linalg.norm(ana) < 1e-12 and np.linalg.norm(num) < 1e-9:
            err = 0.0
        worst = max(worst, err)
    return worst
