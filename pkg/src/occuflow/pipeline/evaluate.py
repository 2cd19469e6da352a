"""Forecasting with a trained model, the copy-last baseline and chamfer evaluation reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..flowwarp import one_hot_labels, warp_static
from ..geometry import PointCloud, PoseSE2, SemanticOccupancyGrid
from ..metrics import chamfer
from ..render import extract_pointcloud, saturated_logits
from ..synth import EpisodeTruth, future_poses
from ..tensor import Tensor, no_grad
from .episode_io import EpisodeFormatError, list_episodes, read_episode
from .model import WorldModel
from .train import DataError, history

_F32 = np.dtype("<f4")


@dataclass
class ForecastResult:
    frame: int
    clouds: list[PointCloud]
    poses: np.ndarray | None  # [N_f, 3]
    logits: np.ndarray | None = None  # [N_f, H0, W0, D0]


def _check_rays(ep: EpisodeTruth, frame: int, n_future: int) -> None:
    if frame + n_future >= ep.n_frames:
        raise DataError(f"episode has {ep.n_frames} frames; frame {frame} needs rays for frames up to {frame + n_future}")


def forecast(
    model: WorldModel,
    ep: EpisodeTruth,
    frame: int,
    history_grids: Sequence[SemanticOccupancyGrid] | None = None,
    keep_logits: bool = False,
    argmax: bool = False,
) -> ForecastResult:
    """One forward pass for all horizons, each rendered against its own frame's rays.

    ``history_grids`` overrides the episode's occupancy history (e.g. corrupted inputs).
    """
    n_f = model.n_future
    _check_rays(ep, frame, n_f)
    grids, poses = history(ep, frame, model.config.n_hist)
    if history_grids is not None:
        grids = list(history_grids)
    with no_grad():
        fc = model(grids, poses)
    logits = fc.logits.data
    clouds = [
        extract_pointcloud(logits[k], ep.rays[frame + 1 + k], ep.geometry, argmax=argmax) for k in range(n_f)
    ]
    return ForecastResult(frame, clouds, None if fc.poses is None else fc.poses.data.copy(), logits if keep_logits else None)


def copy_last_grids(grid: SemanticOccupancyGrid, poses: Sequence[PoseSE2]) -> list[SemanticOccupancyGrid]:
    """The last observed grid, ego-compensated into each future frame by a static warp."""
    geo = grid.geometry
    c0 = len(grid.classes)
    feat = Tensor(one_hot_labels(grid))
    out = []
    for p in poses:
        warped, inside = warp_static(feat, p, geo)
        labels = np.argmax(warped.data.reshape(geo.dims + (c0,)), axis=-1).astype(np.uint8)
        labels[~inside] = 0
        out.append(grid.with_labels(labels))
    return out


def baseline_forecast(ep: EpisodeTruth, frame: int, n_future: int) -> ForecastResult:
    """Copy-last-frame predictor with ground-truth future poses, rendered from saturated logits."""
    _check_rays(ep, frame, n_future)
    poses = future_poses(ep, frame)[:n_future]
    grids = copy_last_grids(ep.grids[frame], poses)
    clouds = [
        extract_pointcloud(saturated_logits(g), ep.rays[frame + 1 + k], ep.geometry) for k, g in enumerate(grids)
    ]
    return ForecastResult(frame, clouds, np.stack([p.as_array() for p in poses]))


# -- forecast directories --------------------------------------------------------

def write_forecast(result: ForecastResult, out: str | Path) -> Path:
    """``forecast.json`` plus ``points/frame_%04d.bin`` for frames ``T+1 .. T+N_f``."""
    out = Path(out)
    (out / "points").mkdir(parents=True, exist_ok=True)
    meta = {
        "frame": result.frame,
        "n_future": len(result.clouds),
        "poses": None if result.poses is None else [[float(v) for v in row] for row in result.poses],
    }
    (out / "forecast.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for k, pc in enumerate(result.clouds, start=1):
        (out / "points" / f"frame_{result.frame + k:04d}.bin").write_bytes(pc.points.astype(_F32).tobytes())
    return out


def read_forecast(path: str | Path) -> ForecastResult:
    path = Path(path)
    try:
        meta = json.loads((path / "forecast.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise EpisodeFormatError(f"{path}: cannot read forecast.json: {e}") from e
    t, n = int(meta["frame"]), int(meta["n_future"])
    clouds = []
    for k in range(1, n + 1):
        raw = (path / "points" / f"frame_{t + k:04d}.bin").read_bytes()
        clouds.append(PointCloud(np.frombuffer(raw, dtype=_F32).astype(np.float64).reshape(-1, 3)))
    poses = None if meta["poses"] is None else np.asarray(meta["poses"], dtype=np.float64)
    return ForecastResult(t, clouds, poses)


def is_forecast_dir(path: str | Path) -> bool:
    return (Path(path) / "forecast.json").is_file()


# -- reports -------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-horizon chamfer averaged over episodes, for the model and the copy-last baseline."""

    chamfer: list[float]
    baseline: list[float]
    valid_ray_fraction: float
    episodes: int
    period: float = 0.5
    per_episode: dict[str, list[float]] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean(self.chamfer))

    @property
    def baseline_average(self) -> float:
        return float(np.mean(self.baseline))

    def rows(self) -> list[dict]:
        out = []
        for method, values in (("model", self.chamfer), ("baseline", self.baseline)):
            for k, v in enumerate(values, start=1):
                out.append({"method": method, "horizon": str(k), "time_s": repr(k * self.period), "chamfer": repr(float(v))})
            out.append({"method": method, "horizon": "Avg", "time_s": "", "chamfer": repr(float(np.mean(values)))})
        for r in out:
            r["valid_ray_fraction"] = repr(float(self.valid_ray_fraction))
            r["episodes"] = str(self.episodes)
        return out

    def write_csv(self, path: str | Path) -> None:
        cols = ["method", "horizon", "time_s", "chamfer", "valid_ray_fraction", "episodes"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())


def evaluate_forecasts(
    preds: dict[str, ForecastResult], episodes: dict[str, EpisodeTruth], with_baseline: bool = True
) -> EvalReport:
    """Chamfer per horizon, averaged over episodes in name order."""
    if sorted(preds) != sorted(episodes):
        missing = sorted(set(episodes) ^ set(preds))
        raise DataError(f"prediction/ground-truth episode sets differ: {missing[:5]}")
    if not preds:
        raise DataError("nothing to evaluate")
    n_f = {len(p.clouds) for p in preds.values()}
    if len(n_f) != 1:
        raise DataError(f"forecasts disagree on the horizon count: {sorted(n_f)}")
    n_f = n_f.pop()
    per_episode: dict[str, list[float]] = {}
    base_rows = []
    n_pred = n_gt = 0
    for name in sorted(preds):
        pr, ep = preds[name], episodes[name]
        if pr.frame + n_f >= ep.n_frames:
            raise DataError(f"{name}: forecast from frame {pr.frame} exceeds the {ep.n_frames}-frame episode")
        row = []
        for k in range(n_f):
            gt = ep.points[pr.frame + 1 + k]
            row.append(chamfer(pr.clouds[k], gt))
            n_pred += len(pr.clouds[k])
            n_gt += len(gt)
        per_episode[name] = row
        if with_baseline:
            b = baseline_forecast(ep, pr.frame, n_f)
            base_rows.append([chamfer(b.clouds[k], ep.points[pr.frame + 1 + k]) for k in range(n_f)])
    model_cd = np.mean(np.array([per_episode[n] for n in sorted(per_episode)]), axis=0)
    base_cd = np.mean(np.array(base_rows), axis=0) if base_rows else np.full(n_f, np.nan)
    period = next(iter(episodes.values())).spec.period
    return EvalReport(
        [float(v) for v in model_cd], [float(v) for v in base_cd], n_pred / max(n_gt, 1), len(preds), period, per_episode
    )


def evaluate_dirs(pred_dir: str | Path, gt_dir: str | Path) -> EvalReport:
    """Match forecast directories to episode directories by name (or a single pair) and evaluate."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    gts = list_episodes(gt_dir)
    if not gts:
        raise EpisodeFormatError(f"no episodes under {gt_dir}")
    if is_forecast_dir(pred_dir):
        if len(gts) != 1:
            raise DataError(f"one forecast at {pred_dir} but {len(gts)} ground-truth episodes")
        preds = {gts[0].name: read_forecast(pred_dir)}
    else:
        preds = {p.name: read_forecast(p) for p in sorted(pred_dir.iterdir()) if is_forecast_dir(p)}
    episodes = {p.name: read_episode(p) for p in gts}
    return evaluate_forecasts(preds, episodes)
