"""Differentiable layers and losses with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .autograd import DTYPE, Tensor, absolute, as_tensor, matmul, reshape, transpose


class ShapeError(ValueError):
    """Operand shapes are inconsistent; the message names the offending axis."""


# -- activations and losses ---------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        s = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - s),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    shifted = z - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)

    def backward(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - prob * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def cross_entropy(
    logits: Tensor,
    target: np.ndarray,
    axis: int = -1,
    mask: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of ``target`` indices under ``softmax(logits)``.

    ``target`` has the shape of ``logits`` with ``axis`` removed. ``mask`` (same
    shape as ``logits``) excludes padded classes from the normalizer.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    axis = axis % logits.ndim
    k = logits.shape[axis]
    if target.shape != logits.shape[:axis] + logits.shape[axis + 1:]:
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape} without axis {axis}")
    if target.size and (target.min() < 0 or target.max() >= k):
        raise IndexError(f"target index out of range [0, {k}) along axis {axis}")
    if mask is not None:
        picked_valid = np.take_along_axis(mask, np.expand_dims(target, axis), axis=axis)
        if not np.all(picked_valid):
            raise IndexError("target index points at a masked-out entry")
    logp = log_softmax(logits, axis=axis, mask=mask)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    np.put_along_axis(onehot, np.expand_dims(target, axis), 1.0, axis=axis)
    nll = -(logp * onehot).sum(axis=axis)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return nll.sum()
    return nll.mean()


def l1_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    return absolute(pred - as_tensor(target)).mean()


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped ``[out, in]``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input last axis {x.shape[-1]} != weight in-features {weight.shape[1]}")
    vec = x.ndim == 1
    out = matmul(reshape(x, (1, x.shape[0])) if vec else x, transpose(weight))
    if bias is not None:
        out = out + bias
    return reshape(out, (weight.shape[0],)) if vec else out


# -- convolution --------------------------------------------------------------

def _conv_cl(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int) -> Tensor:
    """Cross-correlation over channels-last input ``[B, *spatial, C_in]``.

    ``weight`` is ``[C_out, C_in, *kernel]``; the output is ``[B, *out, C_out]``.
    """
    nd = weight.ndim - 2
    if x.ndim != nd + 2:
        raise ShapeError(f"conv{nd}d: expected {nd + 2}-d input, got {x.ndim}-d")
    c_out, c_in = weight.shape[:2]
    ksize = weight.shape[2:]
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv{nd}d: channel axis has {x.shape[-1]} channels, weight expects {c_in}")
    for i, kk in enumerate(ksize):
        if kk % 2 == 0:
            raise ShapeError(f"conv{nd}d: kernel axis {i} has even size {kk}")
        span = x.shape[1 + i] + 2 * padding - kk
        if span < 0 or span % stride:
            raise ShapeError(f"conv{nd}d: spatial axis {i} extent {x.shape[1 + i]} incompatible with kernel/stride/padding")
    xd = x.data
    if padding:
        xp = np.pad(xd, [(0, 0)] + [(padding, padding)] * nd + [(0, 0)])
    else:
        xp = xd
    out_sp = tuple((xp.shape[1 + i] - kk) // stride + 1 for i, kk in enumerate(ksize))
    bsz = xd.shape[0]
    offsets = list(np.ndindex(*ksize))

    def window(o):
        return (slice(None),) + tuple(slice(a, a + stride * (n - 1) + 1, stride) for a, n in zip(o, out_sp))

    # im2col with columns ordered (kernel offset, channel)
    cols = np.concatenate([xp[window(o)] for o in offsets], axis=-1).reshape(-1, len(offsets) * c_in)
    wmat = np.moveaxis(weight.data, 1, -1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape((bsz,) + out_sp + (c_out,))
    parents = (x, weight) + ((bias,) if bias is not None else ())

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = None
        if weight.requires_grad:
            gw = np.moveaxis((g2.T @ cols).reshape((c_out,) + ksize + (c_in,)), -1, 1)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape((bsz,) + out_sp + (len(offsets), c_in))
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for j, o in enumerate(offsets):
                dxp[window(o)] += dcols[..., j, :]
            if padding:
                inner = (slice(None),) + (slice(padding, -padding),) * nd
                gx = dxp[inner]
            else:
                gx = dxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward)


def conv2d_cl(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv_cl(x, weight, bias, stride, padding)


def conv3d_cl(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    return _conv_cl(x, weight, bias, stride, padding)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation on ``[B, C_in, H, W]``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d: expected [B, C, H, W], got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: expected weight [C_out, C_in, k, k], got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input axis 1 (channels) is {x.shape[1]}, weight expects {weight.shape[1]}")
    out = _conv_cl(transpose(x, (0, 2, 3, 1)), weight, bias, stride, padding)
    return transpose(out, (0, 3, 1, 2))


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d cross-correlation on ``[B, C_in, T, H, W]``."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d: expected [B, C, T, H, W], got shape {x.shape}")
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: expected weight [C_out, C_in, k, k, k], got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv3d: input axis 1 (channels) is {x.shape[1]}, weight expects {weight.shape[1]}")
    out = _conv_cl(transpose(x, (0, 2, 3, 4, 1)), weight, bias, stride, padding)
    return transpose(out, (0, 4, 1, 2, 3))


# -- normalization ------------------------------------------------------------

def group_norm_cl(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group norm over channels-last ``[B, ..., C]``."""
    c = x.shape[-1]
    if groups <= 0 or c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide channel axis of size {c}")
    bsz = x.shape[0]
    xd = x.data.reshape(bsz, -1, groups, c // groups)
    mu = xd.mean(axis=(1, 3), keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g4 = gamma.data.reshape(1, 1, groups, c // groups)
    b4 = beta.data.reshape(1, 1, groups, c // groups)
    out = (xhat * g4 + b4).reshape(x.shape)

    def backward(g):
        gd = g.reshape(xd.shape)
        ggamma = (gd * xhat).sum(axis=(0, 1)).reshape(c) if gamma.requires_grad else None
        gbeta = gd.sum(axis=(0, 1)).reshape(c) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = gd * g4
            m1 = dxhat.mean(axis=(1, 3), keepdims=True)
            m2 = (dxhat * xhat).mean(axis=(1, 3), keepdims=True)
            gx = (inv * (dxhat - m1 - xhat * m2)).reshape(x.shape)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Group norm on channels-first ``[B, C, ...]``."""
    if x.ndim < 2:
        raise ShapeError(f"group_norm: expected [B, C, ...], got shape {x.shape}")
    perm = (0,) + tuple(range(2, x.ndim)) + (1,)
    inv = tuple(np.argsort(perm))
    return transpose(group_norm_cl(transpose(x, perm), groups, gamma, beta, eps), inv)


# -- attention ----------------------------------------------------------------

def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    out_weight: Tensor | None = None,
    out_bias: Tensor | None = None,
    return_weights: bool = False,
):
    """Scaled dot-product attention over axis 1 of ``[B, L, C]`` operands.

    Queries may have a different length from keys/values. When ``out_weight`` is
    given the merged heads pass through that output projection.
    """
    bsz, lq, c = q.shape
    if k.shape[0] != bsz or v.shape != k.shape or k.shape[2] != c:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    if heads <= 0 or c % heads:
        raise ShapeError(f"attention: {heads} heads do not divide channel axis of size {c}")
    lk = k.shape[1]
    d = c // heads
    qh = transpose(reshape(q, (bsz, lq, heads, d)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (bsz, lk, heads, d)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (bsz, lk, heads, d)), (0, 2, 1, 3))
    scores = matmul(qh, kh) * (1.0 / math.sqrt(d))
    weights = softmax(scores, axis=-1)
    ctx = matmul(weights, vh)
    out = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, lq, c))
    if out_weight is not None:
        out = linear(out, out_weight, out_bias)
    if return_weights:
        return out, weights
    return out


# -- resampling ---------------------------------------------------------------

def grid_sample(features: Tensor, ix: Tensor, iy: Tensor) -> tuple[Tensor, np.ndarray]:
    """Bilinear lookup of ``features[H, W, C]`` at continuous cell indices.

    Integer ``(ix, iy)`` land on cell centers exactly. Corners outside the grid
    contribute zero, and points outside the half-open range
    ``[-0.5, W - 0.5) x [-0.5, H - 0.5)`` return exact zeros. Returns the sampled
    ``[..., C]`` tensor and the boolean in-range mask.
    """
    ix, iy = as_tensor(ix), as_tensor(iy)
    h, w, c = features.shape
    xs, ys = ix.data, iy.data
    if xs.shape != ys.shape:
        raise ShapeError(f"grid_sample: ix shape {xs.shape} != iy shape {ys.shape}")
    out_shape = xs.shape
    xs, ys = xs.ravel(), ys.ravel()
    n = xs.size
    inside = (xs >= -0.5) & (xs < w - 0.5) & (ys >= -0.5) & (ys < h - 0.5)
    xs_c = np.where(inside, xs, 0.0)
    ys_c = np.where(inside, ys, 0.0)
    x0 = np.floor(xs_c).astype(np.intp)
    y0 = np.floor(ys_c).astype(np.intp)
    fx = xs_c - x0
    fy = ys_c - y0
    rows, cols, vals = [], [], []
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            ok = inside & (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = np.where(ok, cy * w + cx, 0)
            rows.append(np.arange(n))
            cols.append(flat)
            vals.append(np.where(ok, wgt, 0.0))
            corners.append((flat, ok))
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, h * w)
    )
    fflat = features.data.reshape(h * w, c)
    out = np.asarray(mat @ fflat).reshape(out_shape + (c,))

    def backward(g):
        g2 = g.reshape(n, c)
        gf = np.asarray(mat.T @ g2).reshape(h, w, c) if features.requires_grad else None
        gix = giy = None
        if ix.requires_grad or iy.requires_grad:
            vals_c = [np.where(ok[:, None], fflat[flat], 0.0) for flat, ok in corners]
            f00, f01, f10, f11 = vals_c  # (dy, dx) order: 00, 01(dx), 10(dy), 11
            ddx = (1.0 - fy)[:, None] * (f01 - f00) + fy[:, None] * (f11 - f10)
            ddy = (1.0 - fx)[:, None] * (f10 - f00) + fx[:, None] * (f11 - f01)
            gix = np.where(inside, (g2 * ddx).sum(axis=1), 0.0).reshape(out_shape)
            giy = np.where(inside, (g2 * ddy).sum(axis=1), 0.0).reshape(out_shape)
        return gf, gix, giy

    return Tensor._make(out, (features, ix, iy), backward), inside.reshape(out_shape)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Half-pixel-centered linear interpolation weights ``[n_out, n_in]`` (edge clamped)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    mat[np.arange(n_out), lo] += 1.0 - frac
    mat[np.arange(n_out), hi] += frac
    return mat


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``[..., H, W, C]`` to ``[..., out_h, out_w, C]``."""
    h, w = x.shape[-3], x.shape[-2]
    ay = bilinear_matrix(out_h, h)
    ax = bilinear_matrix(out_w, w)
    out = np.einsum("yi,...ijc,xj->...yxc", ay, x.data, ax, optimize=True)

    def backward(g):
        return (np.einsum("yi,...yxc,xj->...ijc", ay, g, ax, optimize=True),)

    return Tensor._make(out, (x,), backward)


__all__ = [
    "ShapeError",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "l1_loss",
    "linear",
    "conv2d",
    "conv3d",
    "conv2d_cl",
    "conv3d_cl",
    "group_norm",
    "group_norm_cl",
    "multi_head_attention",
    "grid_sample",
    "bilinear_matrix",
    "resize_bilinear",
]
