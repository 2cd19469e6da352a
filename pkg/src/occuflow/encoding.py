"""Occupancy history -> spacetime tokens, ego poses -> ego tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PoseSE2, SemanticOccupancyGrid, wrap_angle
from .tensor import Tensor, relu, reshape, take, transpose
from .tensor.functional import ShapeError
from .tensor.nn import ConvGNSiLU, Linear, Module, uniform_init


@dataclass(frozen=True)
class PatchConfig:
    patch: int
    channels: int

    def grid_shape(self, h0: int, w0: int) -> tuple[int, int]:
        if h0 % self.patch or w0 % self.patch:
            raise ShapeError(f"patch size {self.patch} does not divide BEV extent {h0}x{w0}")
        return h0 // self.patch, w0 // self.patch


def embed_classes(labels: np.ndarray, table: Tensor) -> Tensor:
    """Per-voxel row lookup into ``table[C0, C_e]``; returns ``[H0, W0, D0, C_e]``."""
    labels = np.asarray(labels)
    c0, ce = table.shape
    if labels.size and int(labels.max()) >= c0:
        raise ValueError(f"class id {int(labels.max())} >= embedding table size {c0}")
    flat = labels.astype(np.intp)[..., None] * ce + np.arange(ce)
    return take(table, flat)


def collapse_height(emb: Tensor) -> Tensor:
    """``[H0, W0, D0, C_e] -> [H0, W0, D0 * C_e]``; channel ``z * C_e + c``."""
    h, w, d, c = emb.shape
    return reshape(emb, (h, w, d * c))


def split_height(bev: Tensor, depth: int) -> Tensor:
    h, w, k = bev.shape
    if k % depth:
        raise ShapeError(f"channel axis {k} not divisible by depth {depth}")
    return reshape(bev, (h, w, depth, k // depth))


def patchify(x: Tensor, patch: int) -> Tensor:
    """``[..., H0, W0, K] -> [..., H, W, P*P*K]``; patch channel order ``(py, px, k)``."""
    *lead, h0, w0, k = x.shape
    if h0 % patch or w0 % patch:
        raise ShapeError(f"patch size {patch} does not divide spatial extent {h0}x{w0}")
    h, w = h0 // patch, w0 // patch
    n = len(lead)
    y = reshape(x, tuple(lead) + (h, patch, w, patch, k))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = transpose(y, perm)
    return reshape(y, tuple(lead) + (h, w, patch * patch * k))


def unpatchify(x: Tensor, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    *lead, h, w, kk = x.shape
    if kk % (patch * patch):
        raise ShapeError(f"channel axis {kk} not divisible by patch area {patch * patch}")
    k = kk // (patch * patch)
    n = len(lead)
    y = reshape(x, tuple(lead) + (h, w, patch, patch, k))
    perm = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    y = transpose(y, perm)
    return reshape(y, tuple(lead) + (h * patch, w * patch, k))


def check_history(grids: Sequence[SemanticOccupancyGrid]) -> None:
    if not grids:
        raise ValueError("empty occupancy history")
    g0 = grids[0]
    for i, g in enumerate(grids[1:], start=1):
        if g.geometry != g0.geometry:
            raise ValueError(f"history frame {i} geometry {g.geometry} differs from frame 0 {g0.geometry}")
        if g.classes != g0.classes:
            raise ValueError(f"history frame {i} class table differs from frame 0")


class OccupancyEncoder(Module):
    """Class embedding, height collapse, patchify, projection, two Conv2d-GroupNorm-SiLU layers."""

    def __init__(self, rng, num_classes: int, depth: int, embed_dim: int, channels: int, patch: int, groups: int):
        self.class_table = uniform_init(rng, (num_classes, embed_dim), 1)
        self.proj = Linear(rng, patch * patch * depth * embed_dim, channels)
        self.conv1 = ConvGNSiLU(rng, channels, channels, groups)
        self.conv2 = ConvGNSiLU(rng, channels, channels, groups)
        self.patch = patch
        self.depth = depth

    def bev_embedding(self, labels: np.ndarray) -> Tensor:
        """``[N, H0, W0, D0] -> [N, H0, W0, D0 * C_e]``."""
        emb = embed_classes(labels, self.class_table)
        n, h, w, d, c = emb.shape
        return reshape(emb, (n, h, w, d * c))

    def forward(self, labels: np.ndarray) -> Tensor:
        """``labels[N, H0, W0, D0]`` -> spacetime tokens ``[N, H, W, C]``."""
        if labels.shape[-1] != self.depth:
            raise ShapeError(f"occupancy depth axis {labels.shape[-1]} != encoder depth {self.depth}")
        bev = self.bev_embedding(labels)
        tokens = self.proj(patchify(bev, self.patch))
        return self.conv2(self.conv1(tokens))


def ego_displacements(poses: Sequence[PoseSE2]) -> np.ndarray:
    """``[N, 3]`` rows ``(dx, dy, dyaw)`` of frame t in frame t-1; row 0 is zero."""
    out = np.zeros((len(poses), 3))
    for t in range(1, len(poses)):
        a, b = poses[t - 1], poses[t]
        c, s = math.cos(a.yaw), math.sin(a.yaw)
        dx, dy = b.x - a.x, b.y - a.y
        out[t] = (c * dx + s * dy, -s * dx + c * dy, wrap_angle(b.yaw - a.yaw))
    return out


class EgoEncoder(Module):
    """Two linear layers with a ReLU between, applied per history frame."""

    def __init__(self, rng, channels: int, hidden: int | None = None):
        hidden = hidden or channels
        self.fc1 = Linear(rng, 3, hidden)
        self.fc2 = Linear(rng, hidden, channels)

    def forward(self, displacements) -> Tensor:
        x = displacements if isinstance(displacements, Tensor) else Tensor(displacements)
        return self.fc2(relu(self.fc1(x)))


def encode_history(grids: Sequence[SemanticOccupancyGrid], encoder: OccupancyEncoder) -> Tensor:
    check_history(grids)
    labels = np.stack([g.labels for g in grids])
    return encoder(labels)


def encode_ego(poses: Sequence[PoseSE2], encoder: EgoEncoder) -> Tensor:
    return encoder(ego_displacements(poses))


__all__ = [
    "PatchConfig",
    "embed_classes",
    "collapse_height",
    "split_height",
    "patchify",
    "unpatchify",
    "OccupancyEncoder",
    "EgoEncoder",
    "ego_displacements",
    "encode_history",
    "encode_ego",
]
