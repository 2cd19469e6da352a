"""Synthetic driving episodes: static walls, moving boxes, an ego on an arc, a rotating scanner.

World coordinates coincide with the ego frame at frame 0. Every frame is
rasterized in its own ego frame by testing voxel centers against the
world's oriented boxes. A one-voxel ground slab covers the bottom layer and
objects stand on it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage
from shapely import affinity
from shapely.geometry import LineString, Polygon, box as shapely_box
from shapely.ops import unary_union

from .geometry import (
    DEFAULT_CLASSES,
    ClassInfo,
    GridGeometry,
    PointCloud,
    PoseSE2,
    RaySet,
    SemanticOccupancyGrid,
    TraversalBatch,
    relative,
    traverse_rays,
)

GROUND, WALL, BOX = 1, 2, 3


class PlacementError(RuntimeError):
    """Objects could not be placed without overlap."""


@dataclass(frozen=True)
class WorldSpec:
    dims: tuple[int, int, int] = (64, 64, 8)
    range: tuple[float, ...] = (-12.8, -12.8, 0.0, 12.8, 12.8, 3.2)
    n_walls: tuple[int, int] = (4, 8)
    wall_length: tuple[float, float] = (2.0, 7.0)
    wall_thickness: tuple[float, float] = (1.2, 2.4)
    wall_height: tuple[float, float] = (2.2, 3.2)
    n_boxes: tuple[int, int] = (2, 4)
    box_length: tuple[float, float] = (1.6, 3.6)
    box_width: tuple[float, float] = (1.2, 2.0)
    box_height: tuple[float, float] = (1.6, 2.4)
    box_speed: tuple[float, float] = (0.4, 2.0)
    ego_speed: tuple[float, float] = (0.0, 1.6)
    ego_yaw_rate: tuple[float, float] = (-0.15, 0.15)
    period: float = 0.5
    n_hist: int = 4
    n_future: int = 6
    n_frames: int | None = None
    seed: int = 0
    n_azimuth: int = 360
    elevations_deg: tuple[float, ...] = (-3.0, -1.5, 0.0, 1.5)
    sensor_height: float = 1.5
    clearance: float = 1.6
    integer_motion: bool = False
    keep_inside: bool = True
    max_tries: int = 400
    restarts: int = 20

    def __post_init__(self):
        for name in ("wall_length", "wall_thickness", "wall_height", "box_length", "box_width", "box_height"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must satisfy 0 < min <= max, got {(lo, hi)}")
        for name in ("n_walls", "n_boxes"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        for name in ("box_speed", "ego_speed"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} must satisfy 0 <= min <= max, got {(lo, hi)}")
        if self.ego_yaw_rate[0] > self.ego_yaw_rate[1]:
            raise ValueError(f"ego_yaw_rate min > max: {self.ego_yaw_rate}")
        if self.period <= 0 or self.n_hist < 1 or self.n_future < 1:
            raise ValueError("period, n_hist and n_future must be positive")
        if self.frame_count < self.n_hist + self.n_future:
            raise ValueError(f"n_frames={self.frame_count} shorter than n_hist + n_future")
        geo = self.geometry
        diag = float(np.hypot(geo.range[3] - geo.range[0], geo.range[4] - geo.range[1]))
        if self.box_speed[1] * self.period * self.n_future > diag:
            raise ValueError(f"box speed {self.box_speed[1]} m/s crosses the grid diagonal within {self.n_future} frames")

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(tuple(int(v) for v in self.dims), tuple(float(v) for v in self.range))

    @property
    def frame_count(self) -> int:
        return self.n_frames if self.n_frames is not None else self.n_hist + self.n_future

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        tuples = {k: tuple(v) for k, v in d.items() if isinstance(v, list)}
        return cls(**{**d, **tuples})


@dataclass(frozen=True)
class WorldObject:
    """Oriented box on the ground plane; ``velocity`` is in world axes (m/s)."""

    label: int
    center: tuple[float, float]
    half: tuple[float, float]
    yaw: float
    height: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def center_at(self, t: float) -> np.ndarray:
        return np.array(self.center) + np.array(self.velocity) * t

    def polygon(self, t: float = 0.0) -> Polygon:
        c = self.center_at(t)
        p = shapely_box(-self.half[0], -self.half[1], self.half[0], self.half[1])
        p = affinity.rotate(p, self.yaw, origin=(0, 0), use_radians=True)
        return affinity.translate(p, c[0], c[1])

    def contains_xy(self, x: np.ndarray, y: np.ndarray, t: float) -> np.ndarray:
        c = self.center_at(t)
        dx, dy = x - c[0], y - c[1]
        cs, sn = math.cos(self.yaw), math.sin(self.yaw)
        lx = cs * dx + sn * dy
        ly = -sn * dx + cs * dy
        return (np.abs(lx) < self.half[0]) & (np.abs(ly) < self.half[1])


@dataclass(eq=False)
class EpisodeTruth:
    spec: WorldSpec
    grids: list[SemanticOccupancyGrid]
    poses: list[PoseSE2]
    rays: list[RaySet]
    points: list[PointCloud]
    flows: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    objects: list[WorldObject] | None = None

    @property
    def geometry(self) -> GridGeometry:
        return self.grids[0].geometry

    @property
    def classes(self) -> tuple[ClassInfo, ...]:
        return self.grids[0].classes

    @property
    def n_frames(self) -> int:
        return len(self.grids)

    def forecast_frames(self) -> list[int]:
        """Frames ``T`` with ``n_hist`` frames of history and ``n_future`` frames ahead."""
        return list(range(self.spec.n_hist - 1, self.n_frames - self.spec.n_future))


def ego_pose(speed: float, yaw_rate: float, t: float) -> PoseSE2:
    """Constant-speed, constant-yaw-rate arc from the world origin, heading +x."""
    if abs(yaw_rate) < 1e-12:
        return PoseSE2(speed * t, 0.0, 0.0)
    r = speed / yaw_rate
    a = yaw_rate * t
    return PoseSE2(r * math.sin(a), r * (1.0 - math.cos(a)), a)


def scanner_rays(spec: WorldSpec) -> RaySet:
    """``n_azimuth`` steps for each elevation ring, ring-major, from the sensor origin."""
    az = np.arange(spec.n_azimuth) * (2.0 * math.pi / spec.n_azimuth)
    el = np.radians(np.asarray(spec.elevations_deg, dtype=np.float64))
    e, a = np.meshgrid(el, az, indexing="ij")
    dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)
    return RaySet.normalized((0.0, 0.0, spec.sensor_height), dirs)


def rasterize(spec: WorldSpec, objects: list[WorldObject], pose: PoseSE2, t: float) -> SemanticOccupancyGrid:
    geo = spec.geometry
    h, w, d = geo.dims
    cx, cy = geo.cell_centers_xy()
    world = pose.apply(np.stack([cx, cy], axis=-1))
    wx, wy = world[..., 0], world[..., 1]
    zc = geo.range[2] + (np.arange(d) + 0.5) * geo.pitch[2]
    labels = np.zeros((h, w, d), dtype=np.uint8)
    labels[:, :, 0] = GROUND
    for obj in objects:
        foot = obj.contains_xy(wx, wy, t)
        if not foot.any():
            continue
        col = (zc > geo.range[2] + geo.pitch[2]) & (zc < obj.height)
        labels[foot[:, :, None] & col[None, None, :]] = obj.label
    return SemanticOccupancyGrid(geo, labels, DEFAULT_CLASSES)


def raycast_gt(grid: SemanticOccupancyGrid, rays: RaySet, traversal: TraversalBatch | None = None) -> tuple[PointCloud, np.ndarray]:
    """First-hit points at the entry face of the first occupied voxel, and the mask of rays that hit.

    ``traversal`` may carry a precomputed :func:`traverse_rays` result for ``rays``.
    """
    batch = traversal if traversal is not None else traverse_rays(grid.geometry, rays.origin, rays.directions)
    if batch.valid.shape[1] == 0:
        return PointCloud(np.zeros((0, 3))), np.zeros(len(rays), dtype=bool)
    v = batch.voxels
    occ = grid.labels[v[..., 1], v[..., 0], v[..., 2]] != 0
    occ &= batch.valid
    hit = occ.any(axis=1)
    first = np.argmax(occ, axis=1)
    t = batch.entry[np.arange(len(rays)), first]
    pts = rays.origin + t[hit][:, None] * rays.directions[hit]
    return PointCloud(pts), hit


def _sample(rng: np.random.Generator, lohi) -> float:
    lo, hi = lohi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _ego_motion(spec: WorldSpec, rng) -> tuple[float, float]:
    if spec.integer_motion:
        pitch = spec.geometry.pitch[0]
        steps = [m for m in range(0, 8) if spec.ego_speed[0] <= m * pitch / spec.period <= spec.ego_speed[1]]
        return float(rng.choice(steps)) * pitch / spec.period, 0.0
    return _sample(rng, spec.ego_speed), _sample(rng, spec.ego_yaw_rate)


def _box_motion(spec: WorldSpec, rng) -> tuple[float, float]:
    """Heading and speed of a dynamic box."""
    if spec.integer_motion:
        pitch = spec.geometry.pitch[0]
        steps = [m for m in range(1, 16) if spec.box_speed[0] <= m * pitch / spec.period <= spec.box_speed[1]]
        if not steps:
            steps = [1]
        return float(rng.integers(0, 4)) * (math.pi / 2), float(rng.choice(steps)) * pitch / spec.period
    return float(rng.uniform(-math.pi, math.pi)), _sample(rng, spec.box_speed)


def _frame_region(spec: WorldSpec, pose: PoseSE2, shrink: float) -> Polygon:
    geo = spec.geometry
    r = geo.range
    p = shapely_box(r[0] + shrink, r[1] + shrink, r[3] - shrink, r[4] - shrink)
    p = affinity.rotate(p, pose.yaw, origin=(0, 0), use_radians=True)
    return affinity.translate(p, pose.x, pose.y)


def _place_objects(spec: WorldSpec, rng, poses: list[PoseSE2], times: np.ndarray) -> list[WorldObject]:
    geo = spec.geometry
    pitch = geo.pitch[0]
    ego_path = LineString([(p.x, p.y) for p in poses]) if len(poses) > 1 else None
    ego_zone = (ego_path if ego_path is not None and ego_path.length > 0 else Polygon()).buffer(spec.clearance)
    if ego_zone.is_empty:
        ego_zone = Polygon([(poses[0].x, poses[0].y)] * 3).buffer(spec.clearance)
    union = unary_union([_frame_region(spec, p, 0.0) for p in poses])
    inner = _frame_region(spec, poses[0], 4 * pitch)
    for p in poses[1:]:
        inner = inner.intersection(_frame_region(spec, p, 4 * pitch))
    taken = [ego_zone]
    minx, miny, maxx, maxy = union.bounds
    objects: list[WorldObject] = []
    t0, t1 = float(times[0]), float(times[-1])

    def free(poly) -> bool:
        return not any(poly.intersects(o) for o in taken)

    n_boxes = int(rng.integers(spec.n_boxes[0], spec.n_boxes[1] + 1))
    n_walls = int(rng.integers(spec.n_walls[0], spec.n_walls[1] + 1))
    for _ in range(n_boxes):
        for _try in range(spec.max_tries):
            heading, speed = _box_motion(spec, rng)
            length, width = _sample(rng, spec.box_length), _sample(rng, spec.box_width)
            region = inner if spec.keep_inside else union
            bx0, by0, bx1, by1 = region.bounds if not region.is_empty else union.bounds
            c = (float(rng.uniform(bx0, bx1)), float(rng.uniform(by0, by1)))
            vel = (speed * math.cos(heading), speed * math.sin(heading))
            obj = WorldObject(BOX, c, (length / 2, width / 2), heading, _sample(rng, spec.box_height), vel)
            swept = unary_union([obj.polygon(t0), obj.polygon(t1)]).convex_hull
            if spec.keep_inside and not inner.contains(swept):
                continue
            halo = swept.buffer(3 * pitch)
            if free(halo):
                taken.append(halo)
                objects.append(obj)
                break
        else:
            raise PlacementError(f"could not place dynamic box {len(objects) + 1} of {n_boxes} after {spec.max_tries} tries")
    for _ in range(n_walls):
        for _try in range(spec.max_tries):
            yaw = float(rng.integers(0, 2)) * (math.pi / 2) if rng.random() < 0.7 else float(rng.uniform(-math.pi, math.pi))
            length, thick = _sample(rng, spec.wall_length), _sample(rng, spec.wall_thickness)
            c = (float(rng.uniform(minx, maxx)), float(rng.uniform(miny, maxy)))
            obj = WorldObject(WALL, c, (length / 2, thick / 2), yaw, _sample(rng, spec.wall_height))
            poly = obj.polygon()
            if free(poly.buffer(pitch)):
                taken.append(poly.buffer(pitch))
                objects.append(obj)
                break
        else:
            raise PlacementError(f"could not place wall {len(objects) - n_boxes + 1} of {n_walls} after {spec.max_tries} tries")
    return objects


def flow_field(spec: WorldSpec, objects: list[WorldObject], poses: list[PoseSE2], frame: int, k: int, dilate: int = 2) -> np.ndarray:
    """Backward BEV flow for horizon ``k`` from ``frame``, meters in frame-``frame`` axes.

    Cells of the frame-``frame`` grid covered by a box's footprint at either
    end of the horizon (dilated by ``dilate`` cells) hold the negated
    displacement of that box over ``k`` frames, so ``q = p + flow(p)`` is
    where the content at ``p`` sat at time ``frame``.
    """
    geo = spec.geometry
    h, w, _ = geo.dims
    out = np.zeros((h, w, 2))
    pose_t = poses[frame]
    c, s = math.cos(pose_t.yaw), math.sin(pose_t.yaw)
    cx, cy = geo.cell_centers_xy()
    world = pose_t.apply(np.stack([cx, cy], axis=-1))
    t_now = frame * spec.period
    t_future = (frame + k) * spec.period
    struct = np.ones((2 * dilate + 1, 2 * dilate + 1), dtype=bool)
    for obj in objects:
        if obj.label != BOX:
            continue
        v = np.array(obj.velocity) * (k * spec.period)
        # world displacement rotated into the frame-T axes
        disp = np.array([c * v[0] + s * v[1], -s * v[0] + c * v[1]])
        foot = obj.contains_xy(world[..., 0], world[..., 1], t_future)
        # vacated cells must also look away from the box's old footprint
        foot |= obj.contains_xy(world[..., 0], world[..., 1], t_now)
        if dilate:
            foot = ndimage.binary_dilation(foot, structure=struct)
        out[foot] = -disp
    return out


def generate_episode(spec: WorldSpec) -> EpisodeTruth:
    rng = np.random.default_rng(spec.seed)
    n = spec.frame_count
    times = np.arange(n) * spec.period
    speed, yaw_rate = _ego_motion(spec, rng)
    poses = [ego_pose(speed, yaw_rate, float(t)) for t in times]
    for attempt in range(spec.restarts):
        try:
            objects = _place_objects(spec, rng, poses, times)
            break
        except PlacementError:
            if attempt == spec.restarts - 1:
                raise
    rays_all = scanner_rays(spec)
    # the scanner is fixed in the ego frame, so one traversal serves every frame
    traversal = traverse_rays(spec.geometry, rays_all.origin, rays_all.directions)
    grids, rays, points = [], [], []
    for i in range(n):
        g = rasterize(spec, objects, poses[i], float(times[i]))
        pc, hit = raycast_gt(g, rays_all, traversal)
        grids.append(g)
        rays.append(RaySet(rays_all.origin, rays_all.directions[hit]))
        points.append(pc)
    ep = EpisodeTruth(spec, grids, poses, rays, points, {}, objects)
    for t in ep.forecast_frames():
        for k in range(1, spec.n_future + 1):
            ep.flows[(t, k)] = flow_field(spec, objects, poses, t, k)
    return ep


def analytic_flow(episode: EpisodeTruth, k: int, frame: int | None = None) -> np.ndarray:
    """``[H0, W0, 2]`` backward flow for horizon ``k`` from ``frame`` (default: first forecast frame)."""
    if not (1 <= k <= episode.spec.n_future):
        raise ValueError(f"horizon k={k} outside [1, {episode.spec.n_future}]")
    if frame is None:
        frame = episode.forecast_frames()[0]
    if episode.objects is not None:
        return flow_field(episode.spec, episode.objects, episode.poses, frame, k)
    if (frame, k) not in episode.flows:
        raise KeyError(f"episode carries no flow for frame {frame}, horizon {k}")
    return episode.flows[(frame, k)]


def future_poses(episode: EpisodeTruth, frame: int) -> list[PoseSE2]:
    """Poses of frames ``frame + k`` (k = 1..N_f) expressed in frame ``frame``."""
    base = episode.poses[frame]
    return [relative(base, episode.poses[frame + k]) for k in range(1, episode.spec.n_future + 1)]


def episode_specs(base: WorldSpec, count: int, seed: int) -> list[WorldSpec]:
    """``count`` specs with per-episode seeds drawn from one master seed."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [replace(base, seed=int(s)) for s in seeds]
