"""On-disk episode format.

An episode directory holds ``manifest.json``, ``frames/frame_%04d.occ``
(raw class bytes, index ``((z*H0)+y)*W0+x``), ``poses.csv`` (absolute
SE(2) poses in the frame-0 world), ``rays/frame_%04d.bin`` (little-endian
float32 origin xyz then direction xyz per ray), ``points/frame_%04d.bin``
(float32 xyz per point) and optionally ``flow/flow_%04d_k%d.bin`` (float32
flow pairs per BEV cell, row-major over ``(y, x)``).

Rays are stored for returning beams only, so ray ``i`` of a frame pairs
with point ``i``.
"""

from __future__ import annotations

import csv
import io
import json
import re
from pathlib import Path

import numpy as np

from ..geometry import ClassInfo, GridGeometry, PointCloud, PoseSE2, RaySet, SemanticOccupancyGrid
from ..synth import EpisodeTruth, WorldSpec


class EpisodeFormatError(ValueError):
    pass


_F32 = np.dtype("<f4")


def _manifest(ep: EpisodeTruth) -> dict:
    geo = ep.geometry
    return {
        "classes": [{"name": c.name, "is_dynamic": c.is_dynamic} for c in ep.classes],
        "dims": list(geo.dims),
        "frame_count": ep.n_frames,
        "n_future": ep.spec.n_future,
        "n_hist": ep.spec.n_hist,
        "period": ep.spec.period,
        "range": list(geo.range),
        "seed": ep.spec.seed,
    }


def _poses_csv(poses: list[PoseSE2]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "x", "y", "yaw"])
    for i, p in enumerate(poses):
        w.writerow([i, repr(p.x), repr(p.y), repr(p.yaw)])
    return buf.getvalue()


def write_episode(ep: EpisodeTruth, out: str | Path) -> Path:
    out = Path(out)
    for sub in ("frames", "rays", "points"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(_manifest(ep), indent=2, sort_keys=True) + "\n")
    (out / "poses.csv").write_text(_poses_csv(ep.poses))
    for i in range(ep.n_frames):
        (out / "frames" / f"frame_{i:04d}.occ").write_bytes(ep.grids[i].to_bytes())
        r = ep.rays[i]
        payload = np.concatenate([r.origin, r.directions.reshape(-1)]).astype(_F32)
        (out / "rays" / f"frame_{i:04d}.bin").write_bytes(payload.tobytes())
        (out / "points" / f"frame_{i:04d}.bin").write_bytes(ep.points[i].points.astype(_F32).tobytes())
    if ep.flows:
        (out / "flow").mkdir(exist_ok=True)
        for (t, k), f in sorted(ep.flows.items()):
            (out / "flow" / f"flow_{t:04d}_k{k}.bin").write_bytes(np.asarray(f, dtype=_F32).tobytes())
    return out


def _read_f32(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) % 4:
        raise EpisodeFormatError(f"{path}: {len(raw)} bytes is not a whole number of float32 values")
    return np.frombuffer(raw, dtype=_F32).astype(np.float64)


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise EpisodeFormatError(f"{path}: cannot read manifest.json: {e}") from e
    for key in ("classes", "dims", "frame_count", "n_future", "n_hist", "period", "range", "seed"):
        if key not in m:
            raise EpisodeFormatError(f"{path}/manifest.json lacks field {key!r}")
    return m


def read_episode(path: str | Path) -> EpisodeTruth:
    path = Path(path)
    m = read_manifest(path)
    geo = GridGeometry(tuple(int(v) for v in m["dims"]), tuple(float(v) for v in m["range"]))
    classes = tuple(ClassInfo(c["name"], bool(c["is_dynamic"])) for c in m["classes"])
    n = int(m["frame_count"])
    spec = WorldSpec(
        dims=geo.dims, range=geo.range, period=float(m["period"]), n_hist=int(m["n_hist"]),
        n_future=int(m["n_future"]), n_frames=n, seed=int(m["seed"]),
    )
    poses = _read_poses(path / "poses.csv", n)
    grids, rays, points = [], [], []
    h, w, _ = geo.dims
    try:
        for i in range(n):
            grids.append(SemanticOccupancyGrid.from_bytes((path / "frames" / f"frame_{i:04d}.occ").read_bytes(), geo, classes))
            r = _read_f32(path / "rays" / f"frame_{i:04d}.bin")
            if len(r) < 3 or (len(r) - 3) % 3:
                raise EpisodeFormatError(f"{path}: ray file {i} has {len(r)} floats")
            rays.append(RaySet(r[:3], r[3:].reshape(-1, 3)))
            points.append(PointCloud(_read_f32(path / "points" / f"frame_{i:04d}.bin").reshape(-1, 3)))
    except OSError as e:
        raise EpisodeFormatError(f"{path}: missing frame data: {e}") from e
    flows = {}
    flow_dir = path / "flow"
    if flow_dir.is_dir():
        pat = re.compile(r"flow_(\d{4})_k(\d+)\.bin$")
        for f in sorted(flow_dir.iterdir()):
            mt = pat.match(f.name)
            if mt:
                flows[(int(mt.group(1)), int(mt.group(2)))] = _read_f32(f).reshape(h, w, 2)
    return EpisodeTruth(spec, grids, poses, rays, points, flows, None)


def _read_poses(path: Path, n: int) -> list[PoseSE2]:
    try:
        rows = list(csv.DictReader(path.read_text().splitlines()))
    except OSError as e:
        raise EpisodeFormatError(f"cannot read {path}: {e}") from e
    if len(rows) != n:
        raise EpisodeFormatError(f"{path}: {len(rows)} poses for {n} frames")
    poses = []
    for i, r in enumerate(rows):
        if int(r["frame"]) != i:
            raise EpisodeFormatError(f"{path}: row {i} is frame {r['frame']}")
        poses.append(PoseSE2(float(r["x"]), float(r["y"]), float(r["yaw"])))
    return poses


def is_episode_dir(path: str | Path) -> bool:
    return (Path(path) / "manifest.json").is_file()


def list_episodes(root: str | Path) -> list[Path]:
    """Episode directories under ``root`` (or ``root`` itself), sorted by name."""
    root = Path(root)
    if is_episode_dir(root):
        return [root]
    if not root.is_dir():
        raise EpisodeFormatError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if is_episode_dir(p))
