"""Spatial-aware local-temporal attention blocks and the decoders built on them.

Token maps are channels-last ``[N, H, W, C]`` with ``N`` the temporal axis.
Every residual branch ends in a zero-initialized projection, so a freshly
built stack is exactly the identity on its input.
"""

from __future__ import annotations

import numpy as np

from .encoding import unpatchify
from .tensor import Tensor, getitem, reshape, transpose
from .tensor import functional as F
from .tensor.autograd import silu
from .tensor.nn import Conv2d, Conv3d, GroupNorm, Linear, Module, uniform_init, zeros_param


def _to_sites(x: Tensor) -> Tensor:
    """``[N, H, W, C] -> [H*W, N, C]``."""
    n, h, w, c = x.shape
    return transpose(reshape(x, (n, h * w, c)), (1, 0, 2))


def _from_sites(x: Tensor, h: int, w: int) -> Tensor:
    hw, n, c = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h, w, c))


class SaltBlock(Module):
    """Conv2d Q/K/V, temporal multi-head attention per site, Conv3d feed-forward.

    With ``cross=True`` queries come from a separate map (future query maps)
    and keys/values from the context; the temporal lengths may differ.
    """

    def __init__(self, rng, channels: int, heads: int, ffn_channels: int, groups: int, cross: bool = False):
        if channels % heads:
            raise F.ShapeError(f"{heads} heads do not divide {channels} channels")
        self.norm_attn = GroupNorm(groups, channels)
        if cross:
            self.norm_ctx = GroupNorm(groups, channels)
            self.q_conv = Conv2d(rng, channels, channels, 3)
            self.kv_conv = Conv2d(rng, channels, 2 * channels, 3)
        else:
            self.qkv_conv = Conv2d(rng, channels, 3 * channels, 3)
        self.out_weight = zeros_param((channels, channels))
        self.out_bias = zeros_param((channels,))
        self.norm_ffn = GroupNorm(groups, channels)
        self.ffn1 = Conv3d(rng, channels, ffn_channels, 3)
        self.ffn2 = Conv3d(rng, ffn_channels, channels, 3, zero=True)
        self.heads = heads
        self.channels = channels
        self.cross = cross

    def qkv(self, x: Tensor, context: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
        c = self.channels
        xn = self.norm_attn(x)
        if self.cross:
            q = self.q_conv(xn)
            kv = self.kv_conv(self.norm_ctx(context))
            return q, getitem(kv, (Ellipsis, slice(0, c))), getitem(kv, (Ellipsis, slice(c, 2 * c)))
        qkv = self.qkv_conv(xn)
        return (
            getitem(qkv, (Ellipsis, slice(0, c))),
            getitem(qkv, (Ellipsis, slice(c, 2 * c))),
            getitem(qkv, (Ellipsis, slice(2 * c, 3 * c))),
        )

    def attention(self, x: Tensor, context: Tensor | None = None, return_weights: bool = False):
        n, h, w, c = x.shape
        q, k, v = self.qkv(x, context)
        res = F.multi_head_attention(
            _to_sites(q), _to_sites(k), _to_sites(v), self.heads, self.out_weight, self.out_bias, return_weights
        )
        if return_weights:
            out, weights = res
            return _from_sites(out, h, w), weights
        return _from_sites(res, h, w)

    def feed_forward(self, x: Tensor) -> Tensor:
        n, h, w, c = x.shape
        y = reshape(self.norm_ffn(x), (1, n, h, w, c))
        y = self.ffn2(silu(self.ffn1(y)))
        return reshape(y, (n, h, w, c))

    def forward(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        x = x + self.attention(x, context)
        return x + self.feed_forward(x)


def salt_block(tokens: Tensor, block: SaltBlock) -> Tensor:
    return block(tokens)


class SpatialTemporalEncoder(Module):
    """Adds projected ego tokens to every frame's map, then runs the encoder blocks."""

    def __init__(self, rng, channels: int, heads: int, ffn_channels: int, groups: int, depth: int):
        self.ego_proj = Linear(rng, channels, channels)
        self.blocks = [SaltBlock(rng, channels, heads, ffn_channels, groups) for _ in range(depth)]

    def forward(self, tokens: Tensor, ego: Tensor) -> Tensor:
        if tokens.shape[0] != ego.shape[0]:
            raise F.ShapeError(f"history length mismatch: tokens {tokens.shape[0]} vs ego tokens {ego.shape[0]}")
        n, _, _, c = tokens.shape
        x = tokens + reshape(self.ego_proj(ego), (n, 1, 1, c))
        for block in self.blocks:
            x = block(x)
        return x


class FlowDecoder(Module):
    """Decoder blocks, then a flow head and a pooled pose head on the last frame.

    Flow is predicted at patch resolution in units of voxel pitch, upsampled
    bilinearly to the full BEV grid and returned in meters as
    ``[N_f, H0, W0, 2]``. Poses are ``[N_f, 3]`` rows ``(dx, dy, dyaw)`` of
    frame ``T+k`` expressed in frame ``T``.
    """

    def __init__(self, rng, channels, heads, ffn_channels, groups, depth, n_future, patch, pitch, pose_scale=1.0):
        self.blocks = [SaltBlock(rng, channels, heads, ffn_channels, groups) for _ in range(depth)]
        self.flow_head = Conv2d(rng, channels, 2 * n_future, 1, zero=True)
        self.pose_head = Linear(rng, channels, 3 * n_future, zero=True)
        self.n_future = n_future
        self.patch = patch
        self.pitch = float(pitch)
        self.pose_scale = float(pose_scale)

    def refine(self, h: Tensor) -> Tensor:
        for block in self.blocks:
            h = block(h)
        return h

    def heads(self, last: Tensor) -> tuple[Tensor, Tensor]:
        """``last[H, W, C]`` -> (flow ``[N_f, H0, W0, 2]`` meters, poses ``[N_f, 3]``)."""
        hh, ww, c = last.shape
        nf = self.n_future
        raw = reshape(self.flow_head(reshape(last, (1, hh, ww, c))), (hh, ww, nf, 2))
        coarse = transpose(raw, (2, 0, 1, 3)) * self.pitch
        flow = F.resize_bilinear(coarse, hh * self.patch, ww * self.patch)
        pooled = reshape(last, (hh * ww, c)).mean(axis=0)
        poses = reshape(self.pose_head(pooled), (nf, 3)) * self.pose_scale
        return flow, poses

    def forward(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        h = self.refine(h)
        last = getitem(h, h.shape[0] - 1)
        flow, poses = self.heads(last)
        return flow, poses, last


class VanillaDecoder(Module):
    """Learned future query maps cross-attend to the encoded history."""

    def __init__(self, rng, channels, heads, ffn_channels, groups, depth, n_future, grid_hw):
        h, w = grid_hw
        self.queries = uniform_init(rng, (n_future, h, w, channels), channels)
        self.blocks = [SaltBlock(rng, channels, heads, ffn_channels, groups, cross=True) for _ in range(depth)]
        self.out = Conv2d(rng, channels, channels, 1, zero=True)

    def forward(self, h: Tensor) -> Tensor:
        x = self.queries
        for block in self.blocks:
            x = block(x, context=h)
        return self.out(x)


class OccupancyHead(Module):
    """Per-cell linear map to ``patch**2 * D0`` logits plus a learned range slope.

    The range term adds ``range_weight[z] * r`` where ``r`` is the horizontal
    distance (in voxel pitches) of the voxel column from the grid center, the
    sensor position of every rendered frame. It lets a per-cell head order
    surfaces front-to-back along rays; it starts at zero.
    """

    def __init__(self, rng, channels: int, depth: int, patch: int, bev_hw: tuple[int, int], zero: bool = False):
        self.linear = Linear(rng, channels, patch * patch * depth, zero=zero)
        self.range_weight = zeros_param((depth,))
        h0, w0 = bev_hw
        ys = np.arange(h0) + 0.5 - h0 / 2
        xs = np.arange(w0) + 0.5 - w0 / 2
        self._radius = np.sqrt(ys[:, None] ** 2 + xs[None, :] ** 2)[..., None]
        self.patch = patch
        self.depth = depth

    def forward(self, features: Tensor) -> Tensor:
        """``[..., H', W', C] -> [..., H' * patch, W' * patch, D0]``."""
        logits = unpatchify(self.linear(features), self.patch)
        return logits + self.range_weight * self._radius


def decode_occupancy(bev_features: Tensor, head: OccupancyHead) -> Tensor:
    return head(bev_features)
