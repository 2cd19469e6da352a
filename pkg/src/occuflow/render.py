"""Ray-wise rendering of occupancy logits into depths and point clouds.

Each ray carries one sample per voxel it traverses, placed at the midpoint
of the ray's entry and exit distances for that voxel. Per-ray logits are
gathered from the voxel grid, normalized with a softmax over the ray's
samples and read out as an expected depth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import GridGeometry, PointCloud, RaySet, SemanticOccupancyGrid, linear_voxel_index, traverse_rays
from .tensor import Tensor, getitem, take
from .tensor import functional as F

log = logging.getLogger(__name__)


class EmptyRayBatch(ValueError):
    """No ray in a batch can contribute to the loss."""


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Padded per-ray samples: row ``r`` holds ``counts[r]`` valid entries, nearest first."""

    index: np.ndarray  # intp [R, S], flat index into labels[y, x, z]
    depth: np.ndarray  # [R, S]
    entry: np.ndarray  # [R, S]
    exit: np.ndarray  # [R, S]
    valid: np.ndarray  # bool [R, S]

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    @property
    def hit(self) -> np.ndarray:
        """Rays with at least one sample."""
        return self.counts > 0

    def __len__(self) -> int:
        return len(self.valid)

    def subset(self, rows) -> "RaySamples":
        return RaySamples(self.index[rows], self.depth[rows], self.entry[rows], self.exit[rows], self.valid[rows])


def ray_samples(geometry: GridGeometry, rays: RaySet, max_range: float | None = None) -> RaySamples:
    """Traverse every ray through the grid and place one sample per voxel."""
    batch = traverse_rays(geometry, rays.origin, rays.directions, max_range)
    index = np.where(batch.valid, linear_voxel_index(geometry, batch.voxels), 0).astype(np.intp)
    depth = np.where(batch.valid, 0.5 * (batch.entry + batch.exit), 0.0)
    return RaySamples(index, depth, batch.entry, batch.exit, batch.valid)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def gather_ray_logits(logits, samples: RaySamples) -> Tensor:
    """``logits[H0, W0, D0]`` -> ``[R, S]`` per-sample logits; padded entries are 0."""
    logits = _as_tensor(logits)
    if logits.ndim != 3:
        raise F.ShapeError(f"occupancy logits must be [H0, W0, D0], got {logits.shape}")
    if samples.index.size and samples.index.max() >= logits.size:
        raise IndexError(f"sample voxel index {samples.index.max()} outside grid of {logits.size} voxels")
    return take(logits, samples.index) * samples.valid.astype(np.float64)


def render_weights(ray_logits, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over each ray's valid samples."""
    return F.softmax(_as_tensor(ray_logits), axis=-1, mask=mask)


def render_depth(ray_logits, depths: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Expected depth ``sum_i w_i d_i`` per ray."""
    depths = np.asarray(depths, dtype=np.float64)
    w = render_weights(ray_logits, mask)
    return (w * depths).sum(axis=-1)


def argmax_depth(ray_logits, depths: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Depth of the highest-logit sample per ray (non-differentiable readout)."""
    z = np.asarray(ray_logits.data if isinstance(ray_logits, Tensor) else ray_logits, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    j = np.argmax(z, axis=-1)
    return np.take_along_axis(np.asarray(depths, dtype=np.float64), j[..., None], axis=-1)[..., 0]


def ray_targets(
    depths: np.ndarray, mask: np.ndarray, gt_depth: np.ndarray, tolerance: float,
    entry: np.ndarray | None = None, exit: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Target sample index per ray and the rays that can be scored.

    The target is the sample whose ``[entry, exit)`` interval contains the
    ground-truth depth, falling back to the nearest sample depth when no
    interval is given or none contains it. A ray is kept when it has samples
    and ``gt_depth`` lies within ``tolerance`` of its sampled span.
    """
    depths = np.asarray(depths, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if depths.shape[-1] == 0:
        empty = np.zeros(depths.shape[:-1], dtype=bool)
        return np.zeros(depths.shape[:-1], dtype=np.intp), empty
    has = mask.any(axis=-1)
    big = np.where(mask, np.abs(depths - gt[..., None]), np.inf)
    target = np.argmin(big, axis=-1)
    if entry is not None and exit is not None:
        inside = mask & (entry <= gt[..., None] + 1e-9) & (gt[..., None] < exit)
        contained = inside.any(axis=-1)
        target = np.where(contained, np.argmax(inside, axis=-1), target)
        lo = np.where(mask, entry, np.inf).min(axis=-1)
        hi = np.where(mask, exit, -np.inf).max(axis=-1)
    else:
        lo = np.where(mask, depths, np.inf).min(axis=-1)
        hi = np.where(mask, depths, -np.inf).max(axis=-1)
    keep = has & (gt >= lo - tolerance) & (gt <= hi + tolerance)
    return np.where(keep, target, 0), keep


def ray_ce_loss(
    ray_logits,
    depths: np.ndarray,
    gt_depth: np.ndarray,
    mask: np.ndarray | None = None,
    tolerance: float = 0.4,
    entry: np.ndarray | None = None,
    exit: np.ndarray | None = None,
    reduction: str = "mean",
) -> Tensor:
    """Cross-entropy of each ray's sample softmax against its ground-truth sample.

    Rays without samples or whose ground truth lies outside the sampled span
    (beyond ``tolerance`` meters, one voxel pitch by default) are dropped.
    Raises :class:`EmptyRayBatch` when nothing is left.
    """
    ray_logits = _as_tensor(ray_logits)
    depths = np.asarray(depths, dtype=np.float64)
    if mask is None:
        mask = np.ones(depths.shape, dtype=bool)
    target, keep = ray_targets(depths, mask, gt_depth, tolerance, entry, exit)
    dropped = int((~keep).sum())
    if dropped:
        log.debug("ray_ce_loss: dropped %d of %d rays", dropped, keep.size)
    if not keep.any():
        raise EmptyRayBatch(f"no valid rays in batch ({keep.size} rays, all dropped)")
    rows = np.nonzero(keep)[0]
    return F.cross_entropy(getitem(ray_logits, rows), target[rows], axis=-1, mask=mask[rows], reduction=reduction)


def samples_loss(logits, samples: RaySamples, gt_depth: np.ndarray, tolerance: float) -> Tensor:
    """:func:`ray_ce_loss` on logits gathered along ``samples``."""
    ray_logits = gather_ray_logits(logits, samples)
    return ray_ce_loss(
        ray_logits, samples.depth, gt_depth, samples.valid, tolerance, samples.entry, samples.exit
    )


def extract_pointcloud(
    logits,
    rays: RaySet,
    geometry: GridGeometry,
    argmax: bool = False,
    samples: RaySamples | None = None,
) -> PointCloud:
    """Render one point per ray that intersects the grid: ``origin + depth * direction``."""
    if samples is None:
        samples = ray_samples(geometry, rays)
    if len(samples) != len(rays):
        raise F.ShapeError(f"{len(samples)} sampled rays for a ray set of {len(rays)}")
    hit = samples.hit
    missing = int((~hit).sum())
    if missing:
        log.debug("extract_pointcloud: %d rays miss the grid", missing)
    sub = samples.subset(hit)
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    ray_logits = data.reshape(-1)[sub.index] * sub.valid
    if argmax:
        depth = argmax_depth(ray_logits, sub.depth, sub.valid)
    else:
        depth = render_depth(Tensor(ray_logits), sub.depth, sub.valid).data
    points = rays.origin + depth[:, None] * rays.directions[hit]
    return PointCloud(points)


def saturated_logits(grid: SemanticOccupancyGrid, origin=(0.0, 0.0, 1.5), level: float = 1e5, slope: float = 1e3) -> np.ndarray:
    """Occupancy as near-hard logits for rendering.

    Occupied voxels get ``level - slope * r`` with ``r`` the distance of the
    voxel center from ``origin``; free voxels get ``-level``. Along a ray the
    nearest occupied voxel then dominates the softmax.
    """
    geo = grid.geometry
    h, w, d = geo.dims
    p = geo.pitch
    xs = geo.range[0] + (np.arange(w) + 0.5) * p[0] - origin[0]
    ys = geo.range[1] + (np.arange(h) + 0.5) * p[1] - origin[1]
    zs = geo.range[2] + (np.arange(d) + 0.5) * p[2] - origin[2]
    r = np.sqrt(ys[:, None, None] ** 2 + xs[None, :, None] ** 2 + zs[None, None, :] ** 2)
    return np.where(grid.occupied, level - slope * r, -level)
