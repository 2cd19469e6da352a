"""Dynamic/static decoupling, pose-aligned backward warping, and refinement.

All warps are backward (gather) warps: each target cell of the future ego
frame looks up the current-frame feature map at a metric location in
frame-``T`` coordinates. Poses passed as :class:`PoseSE2` are constants;
poses passed as ``Tensor[3]`` rows ``(dx, dy, dyaw)`` are differentiated
through.
"""

from __future__ import annotations

import numpy as np

from .geometry import GridGeometry, PoseSE2, SemanticOccupancyGrid
from .tensor import Tensor, cos, getitem, reshape, sin, stack
from .tensor import functional as F
from .tensor.nn import Conv2d, ConvGNSiLU, Module

def build_decouple_mask(grid: SemanticOccupancyGrid) -> np.ndarray:
    """``[H0, W0]`` bool: True where any voxel of the pillar has a dynamic class."""
    dyn = grid.dynamic_ids
    if dyn.size == 0:
        return np.zeros(grid.dims[:2], dtype=bool)
    return np.isin(grid.labels, dyn).any(axis=2)


def _pose_parts(pose) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    if isinstance(pose, PoseSE2):
        return Tensor(pose.x), Tensor(pose.y), Tensor(np.cos(pose.yaw)), Tensor(np.sin(pose.yaw))
    if isinstance(pose, Tensor):
        if pose.shape != (3,):
            raise F.ShapeError(f"pose tensor must be [3] (dx, dy, dyaw), got {pose.shape}")
        yaw = getitem(pose, 2)
        return getitem(pose, 0), getitem(pose, 1), cos(yaw), sin(yaw)
    raise TypeError(f"unsupported pose type {type(pose).__name__}")


def ego_sample_points(geometry: GridGeometry, pose) -> tuple[Tensor, Tensor]:
    """Frame-``T`` metric coordinates of every target cell center, ``apply(pose, center(u))``."""
    cx, cy = geometry.cell_centers_xy()
    tx, ty, c, s = _pose_parts(pose)
    px = c * cx - s * cy + tx
    py = s * cx + c * cy + ty
    return px, py


def _sample_metric(features: Tensor, geometry: GridGeometry, px: Tensor, py: Tensor):
    pitch_x, pitch_y, _ = geometry.pitch
    ix = (px - geometry.range[0]) * (1.0 / pitch_x) - 0.5
    iy = (py - geometry.range[1]) * (1.0 / pitch_y) - 0.5
    return F.grid_sample(features, ix, iy)


def warp_static(src_feat: Tensor, ego_k, geometry: GridGeometry) -> tuple[Tensor, np.ndarray]:
    """Backward warp by the ego pose alone. Returns features and the in-range mask."""
    px, py = ego_sample_points(geometry, ego_k)
    return _sample_metric(src_feat, geometry, px, py)


def warp_dynamic(src_feat: Tensor, flow_k: Tensor, ego_k, geometry: GridGeometry) -> tuple[Tensor, np.ndarray]:
    """Backward warp by ego pose plus the flow sampled at the ego-transformed point.

    ``flow_k[H0, W0, 2]`` is in meters, frame-``T`` axes, and gives for each
    location the offset to where its future content is found at time ``T``.
    """
    px, py = ego_sample_points(geometry, ego_k)
    f, _ = _sample_metric(flow_k, geometry, px, py)
    qx = px + getitem(f, (Ellipsis, 0))
    qy = py + getitem(f, (Ellipsis, 1))
    return _sample_metric(src_feat, geometry, qx, qy)


class Refiner(Module):
    """Two Conv2d-GroupNorm-SiLU layers and a zero-initialized 1x1 projection, residual."""

    def __init__(self, rng, channels: int, groups: int):
        self.conv1 = ConvGNSiLU(rng, channels, channels, groups)
        self.conv2 = ConvGNSiLU(rng, channels, channels, groups)
        self.out = Conv2d(rng, channels, channels, 1, zero=True)

    def forward(self, x: Tensor) -> Tensor:
        """``[B, H0, W0, C] -> [B, H0, W0, C]``."""
        return x + self.out(self.conv2(self.conv1(x)))


def merge(static_w: Tensor, dynamic_w: Tensor, target_mask) -> Tensor:
    """Per-cell blend: weight ``target_mask`` (``[H0, W0]`` or ``[H0, W0, 1]``, in [0, 1]) on the dynamic warp."""
    m = target_mask if isinstance(target_mask, Tensor) else Tensor(np.asarray(target_mask, dtype=np.float64))
    if m.ndim == static_w.ndim - 1:
        m = reshape(m, m.shape + (1,))
    return static_w + m * (dynamic_w - static_w)


def merge_and_refine(static_w: Tensor, dynamic_w: Tensor, target_mask, refiner: Refiner) -> Tensor:
    merged = merge(static_w, dynamic_w, target_mask)
    h, w, c = merged.shape
    return reshape(refiner(reshape(merged, (1, h, w, c))), (h, w, c))


def _pose_list(poses, n: int) -> list:
    if isinstance(poses, Tensor):
        if poses.shape != (n, 3):
            raise F.ShapeError(f"pose tensor shape {poses.shape} != ({n}, 3)")
        return [getitem(poses, k) for k in range(n)]
    poses = list(poses)
    if len(poses) != n:
        raise F.ShapeError(f"{len(poses)} future poses for {n} flow horizons")
    return poses


def forecast_features(
    current_feat: Tensor,
    flow: Tensor,
    future_poses,
    mask: np.ndarray,
    refiner: Refiner,
    geometry: GridGeometry,
) -> Tensor:
    """Warp the current BEV features into each future frame and refine them.

    Static cells take the ego-warped features with dynamic pillars blanked;
    dynamic cells take the flow-warped features. The blend weight is the
    dynamic mask carried along the dynamic warp. Returns ``[N_f, H0, W0, C_w]``.
    """
    nf = flow.shape[0]
    poses = _pose_list(future_poses, nf)
    m = np.asarray(mask, dtype=np.float64)[..., None]
    static_src = current_feat * (1.0 - m)
    mask_t = Tensor(m)
    merged = []
    for k in range(nf):
        flow_k = getitem(flow, k)
        static_w, _ = warp_static(static_src, poses[k], geometry)
        dyn_w, _ = warp_dynamic(current_feat, flow_k, poses[k], geometry)
        m_w, _ = warp_dynamic(mask_t, flow_k, poses[k], geometry)
        merged.append(merge(static_w, dyn_w, m_w))
    return refiner(stack(merged, axis=0))


# -- occupancy-level warping (analytic oracle path) ---------------------------

def one_hot_labels(grid: SemanticOccupancyGrid, static_only: bool = False) -> np.ndarray:
    """``[H0, W0, D0 * C0]`` one-hot class features; ``static_only`` turns dynamic voxels into free."""
    labels = grid.labels
    if static_only:
        labels = np.where(np.isin(labels, grid.dynamic_ids), 0, labels)
    c0 = len(grid.classes)
    h, w, d = grid.dims
    feat = np.zeros((h, w, d, c0))
    np.put_along_axis(feat, labels[..., None].astype(np.intp), 1.0, axis=3)
    return feat.reshape(h, w, d * c0)


def warp_occupancy(grid: SemanticOccupancyGrid, flow_k: np.ndarray, ego_k: PoseSE2) -> tuple[SemanticOccupancyGrid, np.ndarray]:
    """Decoupled warp of a semantic grid into the frame at ``ego_k``.

    Static voxels move by the ego pose only; dynamic pillars follow the flow.
    Returns the forecast grid and the ``[H0, W0]`` mask of target cells whose
    static source lies inside the current grid.
    """
    geo = grid.geometry
    h, w, d = grid.dims
    c0 = len(grid.classes)
    mask = build_decouple_mask(grid).astype(np.float64)[..., None]
    flow_t = Tensor(np.asarray(flow_k, dtype=np.float64))
    static_w, valid = warp_static(Tensor(one_hot_labels(grid, static_only=True)), ego_k, geo)
    dyn_w, _ = warp_dynamic(Tensor(one_hot_labels(grid)), flow_t, ego_k, geo)
    m_w, _ = warp_dynamic(Tensor(mask), flow_t, ego_k, geo)
    sel = m_w.data >= 0.5
    feat = np.where(sel, dyn_w.data, static_w.data).reshape(h, w, d, c0)
    labels = np.argmax(feat, axis=3).astype(np.uint8)
    labels[~valid] = 0
    return grid.with_labels(labels), valid
