"""Voxel grids, SE(2) ego poses, resampling and ray-voxel traversal.

Grids are stored in memory as ``labels[y, x, z]`` (shape ``H0 x W0 x D0``);
the on-disk linear order ``((z * H0) + y) * W0 + x`` is produced by
:meth:`SemanticOccupancyGrid.to_bytes`. Every axis uses the half-open
interval ``[min, max)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# unit-norm tolerance for ray directions; float32 storage keeps |n - 1| near 1e-7
UNIT_TOL = 1e-6

@dataclass(frozen=True)
class ClassInfo:
    name: str
    is_dynamic: bool


DEFAULT_CLASSES: tuple[ClassInfo, ...] = (
    ClassInfo("free", False),
    ClassInfo("ground", False),
    ClassInfo("wall", False),
    ClassInfo("box", True),
)


@dataclass(frozen=True)
class GridGeometry:
    """Metric extent and cell counts of a voxel grid."""

    dims: tuple[int, int, int]  # (H0, W0, D0)
    range: tuple[float, float, float, float, float, float]  # x_min, y_min, z_min, x_max, y_max, z_max

    def __post_init__(self):
        h, w, d = self.dims
        if min(h, w, d) <= 0:
            raise ValueError(f"grid dims must be positive, got {self.dims}")
        x0, y0, z0, x1, y1, z1 = self.range
        if not (x1 > x0 and y1 > y0 and z1 > z0):
            raise ValueError(f"grid range must have positive extents, got {self.range}")

    @property
    def pitch(self) -> tuple[float, float, float]:
        h, w, d = self.dims
        x0, y0, z0, x1, y1, z1 = self.range
        return ((x1 - x0) / w, (y1 - y0) / h, (z1 - z0) / d)

    @property
    def lower(self) -> np.ndarray:
        return np.array(self.range[:3], dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return np.array(self.range[3:], dtype=np.float64)

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric x and y of every BEV cell center, each shaped ``[H0, W0]``."""
        h, w, _ = self.dims
        px, py, _ = self.pitch
        xs = self.range[0] + (np.arange(w) + 0.5) * px
        ys = self.range[1] + (np.arange(h) + 0.5) * py
        gx, gy = np.meshgrid(xs, ys)
        return gx, gy

    def metric_to_cell_xy(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous cell index (centers at integers) for metric BEV points."""
        px, py, _ = self.pitch
        return (x - self.range[0]) / px - 0.5, (y - self.range[1]) / py - 0.5


@dataclass(frozen=True, eq=False)
class SemanticOccupancyGrid:
    geometry: GridGeometry
    labels: np.ndarray  # uint8 [H0, W0, D0]
    classes: tuple[ClassInfo, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.shape != tuple(self.geometry.dims):
            raise ValueError(f"labels shape {labels.shape} != dims {self.geometry.dims}")
        if labels.size and int(labels.max()) >= len(self.classes):
            raise ValueError(f"class id {int(labels.max())} outside class table of size {len(self.classes)}")
        if self.classes[0].name != "free":
            raise ValueError("class 0 must be 'free'")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    @classmethod
    def empty(cls, geometry: GridGeometry, classes=DEFAULT_CLASSES) -> "SemanticOccupancyGrid":
        return cls(geometry, np.zeros(geometry.dims, dtype=np.uint8), classes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != 0

    @property
    def dynamic_ids(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.classes) if c.is_dynamic], dtype=np.uint8)

    def with_labels(self, labels: np.ndarray) -> "SemanticOccupancyGrid":
        return SemanticOccupancyGrid(self.geometry, labels, self.classes)

    def to_bytes(self) -> bytes:
        return np.ascontiguousarray(self.labels.transpose(2, 0, 1)).tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, geometry: GridGeometry, classes=DEFAULT_CLASSES) -> "SemanticOccupancyGrid":
        h, w, d = geometry.dims
        arr = np.frombuffer(raw, dtype=np.uint8)
        if arr.size != h * w * d:
            raise ValueError(f"occupancy payload has {arr.size} bytes, expected {h * w * d}")
        return cls(geometry, arr.reshape(d, h, w).transpose(1, 2, 0).copy(), classes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SemanticOccupancyGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self.classes == other.classes
            and np.array_equal(self.labels, other.labels)
        )


def voxel_center(geometry: GridGeometry, ix: int, iy: int, iz: int) -> np.ndarray:
    h, w, d = geometry.dims
    if not (0 <= ix < w and 0 <= iy < h and 0 <= iz < d):
        raise IndexError(f"voxel index ({ix}, {iy}, {iz}) outside dims {geometry.dims}")
    p = geometry.pitch
    lo = geometry.range
    return np.array([lo[0] + (ix + 0.5) * p[0], lo[1] + (iy + 0.5) * p[1], lo[2] + (iz + 0.5) * p[2]])


def world_to_voxel(geometry: GridGeometry, point) -> tuple[int, int, int] | None:
    """Voxel ``(ix, iy, iz)`` containing ``point``, or ``None`` when out of range."""
    idx = world_to_voxel_many(geometry, np.asarray(point, dtype=np.float64)[None, :])
    if idx[0, 0] < 0:
        return None
    return int(idx[0, 0]), int(idx[0, 1]), int(idx[0, 2])


def world_to_voxel_many(geometry: GridGeometry, points: np.ndarray) -> np.ndarray:
    """Vectorized :func:`world_to_voxel`; out-of-range rows are ``(-1, -1, -1)``."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = geometry.lower, geometry.upper
    inside = np.all((points >= lo) & (points < hi), axis=1)
    pitch = np.array(geometry.pitch)
    raw = np.floor((points - lo) / pitch).astype(np.int64)
    h, w, d = geometry.dims
    # guard against rounding pushing a point exactly onto the upper index
    raw = np.minimum(raw, np.array([w - 1, h - 1, d - 1]))
    raw[~inside] = -1
    return raw


def resample_grid(
    src: SemanticOccupancyGrid, dst_range: Sequence[float], dst_dims: Sequence[int]
) -> SemanticOccupancyGrid:
    """Nearest-neighbor resampling of class IDs at destination voxel centers."""
    dst = GridGeometry(tuple(int(v) for v in dst_dims), tuple(float(v) for v in dst_range))
    h, w, d = dst.dims
    p = dst.pitch
    xs = dst.range[0] + (np.arange(w) + 0.5) * p[0]
    ys = dst.range[1] + (np.arange(h) + 0.5) * p[1]
    zs = dst.range[2] + (np.arange(d) + 0.5) * p[2]
    sp = src.geometry.pitch
    slo = src.geometry.range
    sh, sw, sd = src.dims

    def axis_index(coords, lo, pitch, n):
        raw = np.floor((coords - lo) / pitch).astype(np.int64)
        valid = (coords >= lo) & (coords < lo + n * pitch) & (raw >= 0) & (raw < n)
        return np.clip(raw, 0, n - 1), valid

    ix, vx = axis_index(xs, slo[0], sp[0], sw)
    iy, vy = axis_index(ys, slo[1], sp[1], sh)
    iz, vz = axis_index(zs, slo[2], sp[2], sd)
    labels = src.labels[np.ix_(iy, ix, iz)].copy()
    valid = vy[:, None, None] & vx[None, :, None] & vz[None, None, :]
    labels[~valid] = 0
    return SemanticOccupancyGrid(dst, labels, src.classes)


# -- SE(2) --------------------------------------------------------------------

def wrap_angle(a: float) -> float:
    """Wrap to ``(-pi, pi]``."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class PoseSE2:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "PoseSE2":
        return cls(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    def compose(self, other: "PoseSE2") -> "PoseSE2":
        return compose(self, other)

    def inverse(self) -> "PoseSE2":
        return inverse(self)

    def apply(self, point):
        return apply(self, point)


def compose(a: PoseSE2, b: PoseSE2) -> PoseSE2:
    """``a * b``: first ``b`` then ``a`` (b expressed in a's frame)."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return PoseSE2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(a: PoseSE2) -> PoseSE2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return PoseSE2(-(c * a.x + s * a.y), s * a.x - c * a.y, -a.yaw)


def apply(a: PoseSE2, point):
    """Map a 2D point (or ``[..., 2]`` array) from the pose's frame to its parent frame."""
    p = np.asarray(point, dtype=np.float64)
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    x = c * p[..., 0] - s * p[..., 1] + a.x
    y = s * p[..., 0] + c * p[..., 1] + a.y
    return np.stack([x, y], axis=-1)


def relative(a: PoseSE2, b: PoseSE2) -> PoseSE2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


# -- rays ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RaySet:
    origin: np.ndarray  # [3]
    directions: np.ndarray  # [R, 3]

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        norms = np.linalg.norm(d, axis=1)
        if d.size and np.max(np.abs(norms - 1.0)) > UNIT_TOL:
            raise ValueError(f"ray directions must be unit length (worst |n-1| = {np.max(np.abs(norms - 1.0)):.3g})")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "directions", d)

    @classmethod
    def normalized(cls, origin, directions) -> "RaySet":
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        return cls(origin, d / np.linalg.norm(d, axis=1, keepdims=True))

    def __len__(self) -> int:
        return len(self.directions)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # [N, 3]
    frame: str = "ego"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


def _slab_interval(geometry: GridGeometry, origin: np.ndarray, dirs: np.ndarray):
    """Per-ray parametric interval ``[t0, t1]`` inside the grid box (t0 clamped at 0)."""
    lo, hi = geometry.lower, geometry.upper
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origin) * inv
        tb = (hi - origin) * inv
    tmin = np.where(dirs == 0, np.where((origin >= lo) & (origin < hi), -np.inf, np.inf), np.minimum(ta, tb))
    tmax = np.where(dirs == 0, np.where((origin >= lo) & (origin < hi), np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(np.max(tmin, axis=1), 0.0)
    t1 = np.min(tmax, axis=1)
    return t0, t1


@dataclass(frozen=True, eq=False)
class TraversalBatch:
    """Padded per-ray traversal: ``voxels[r, s]`` = (ix, iy, iz); ``valid[r, s]`` marks real entries."""

    voxels: np.ndarray  # int64 [R, S, 3]
    entry: np.ndarray  # [R, S]
    exit: np.ndarray  # [R, S]
    valid: np.ndarray  # bool [R, S]

    @property
    def counts(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def traverse_rays(
    geometry: GridGeometry, origin, directions, max_range: float | None = None
) -> TraversalBatch:
    """Amanatides-Woo stepping of many rays at once.

    Each ray visits exactly the voxels its segment ``[0, max_range]`` crosses,
    in increasing distance. Rays starting outside the grid begin at their first
    intersection; rays that miss produce no entries.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    dirs = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    h, w, d = geometry.dims
    if max_range is None:
        max_range = float(np.linalg.norm(geometry.upper - geometry.lower))
    t0, t1 = _slab_interval(geometry, origin, dirs)
    t1 = np.minimum(t1, max_range)
    hit = t1 > t0
    pitch = np.array(geometry.pitch)
    lo = geometry.lower
    dims_xyz = np.array([w, h, d])
    start = origin + dirs * np.where(hit, t0, 0.0)[:, None]
    cell = np.floor((start - lo) / pitch).astype(np.int64)
    # a ray entering through a max face lands exactly on the boundary index
    cell = np.clip(cell, 0, dims_xyz - 1)
    step = np.where(dirs > 0, 1, np.where(dirs < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        next_bound = lo + (cell + (step > 0)) * pitch
        tmax = np.where(dirs != 0, (next_bound - origin) / dirs, np.inf)
        tdelta = np.where(dirs != 0, pitch / np.abs(dirs), np.inf)
    max_steps = int(w + h + d + 3)
    vox = np.zeros((n, max_steps, 3), dtype=np.int64)
    ent = np.zeros((n, max_steps))
    ext = np.zeros((n, max_steps))
    valid = np.zeros((n, max_steps), dtype=bool)
    active = hit.copy()
    t_cur = t0.copy()
    rows = np.arange(n)
    for s in range(max_steps):
        if not active.any():
            break
        axis = np.argmin(tmax, axis=1)
        t_next = np.minimum(tmax[rows, axis], t1)
        keep = active & (t_next > t_cur)
        vox[keep, s] = cell[keep]
        ent[keep, s] = t_cur[keep]
        ext[keep, s] = t_next[keep]
        valid[keep, s] = True
        t_cur = np.where(active, t_next, t_cur)
        cell[rows, axis] += np.where(active, step[rows, axis], 0)
        tmax[rows, axis] += np.where(active, tdelta[rows, axis], 0.0)
        inside = np.all((cell >= 0) & (cell < dims_xyz), axis=1)
        active = active & inside & (t_cur < t1)
    used = int(valid.any(axis=0).nonzero()[0].max() + 1) if valid.any() else 0
    # entries can only be skipped at the very first step of a ray, so compact rows left
    if used:
        order = np.argsort(~valid[:, :used], axis=1, kind="stable")
        vox = np.take_along_axis(vox[:, :used], order[:, :, None], axis=1)
        ent = np.take_along_axis(ent[:, :used], order, axis=1)
        ext = np.take_along_axis(ext[:, :used], order, axis=1)
        valid = np.take_along_axis(valid[:, :used], order, axis=1)
        used = int(valid.sum(axis=1).max())
    return TraversalBatch(vox[:, :used], ent[:, :used], ext[:, :used], valid[:, :used])


def traverse_ray(
    geometry: GridGeometry, origin, direction, max_range: float | None = None
) -> list[tuple[tuple[int, int, int], float]]:
    """Ordered ``((ix, iy, iz), entry_distance)`` pairs for a single ray."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > UNIT_TOL:
        raise ValueError("direction must be a unit vector")
    batch = traverse_rays(geometry, origin, direction[None, :], max_range)
    out = []
    for s in range(batch.valid.shape[1]):
        if batch.valid[0, s]:
            v = batch.voxels[0, s]
            out.append(((int(v[0]), int(v[1]), int(v[2])), float(batch.entry[0, s])))
    return out


def linear_voxel_index(geometry: GridGeometry, voxels: np.ndarray) -> np.ndarray:
    """Flat index into ``labels[y, x, z]`` (row-major) for ``(ix, iy, iz)`` triples."""
    h, w, d = geometry.dims
    return (voxels[..., 1] * w + voxels[..., 0]) * d + voxels[..., 2]
