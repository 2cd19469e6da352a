"""Training loop, checkpoints and the per-sample loss."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import ClassInfo, GridGeometry, RaySet
from ..render import ray_samples, ray_targets
from ..synth import EpisodeTruth, future_poses
from ..tensor import AdamW, CyclicLR, Tensor, load_parameters, save_parameters, take
from ..tensor import functional as F
from .config import RunConfig
from .model import Forecast, WorldModel

log = logging.getLogger(__name__)

TRACE_FIELDS = ["step", "epoch", "sample", "loss", "ray_ce", "pose_l1", "lr", "grad_norm", "rays", "skipped"]


class NumericalFailure(FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class DataError(ValueError):
    pass


# -- ray targets ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RayTargets:
    """Scorable rays of one frame: gather indices, sample mask and target sample."""

    index: np.ndarray  # int32 [R, S]
    valid: np.ndarray  # bool [R, S]
    target: np.ndarray  # int [R]

    def __len__(self) -> int:
        return len(self.target)


def prepare_targets(geometry: GridGeometry, rays: RaySet, points: np.ndarray, tolerance: float) -> RayTargets:
    """Sample every returning ray and keep those whose ground-truth hit lies on the sampled span."""
    s = ray_samples(geometry, rays)
    gt = np.linalg.norm(np.asarray(points) - rays.origin, axis=1)
    if len(gt) != len(rays):
        raise DataError(f"{len(rays)} rays but {len(gt)} ground-truth points")
    target, keep = ray_targets(s.depth, s.valid, gt, tolerance, s.entry, s.exit)
    width = int(s.valid[keep].sum(axis=1).max()) if keep.any() else 0
    return RayTargets(
        s.index[keep, :width].astype(np.int32), s.valid[keep, :width].copy(), target[keep].astype(np.int64)
    )


class TargetCache:
    """Lazily computed :class:`RayTargets` per ``(episode, frame)``."""

    def __init__(self, tolerance: float):
        self.tolerance = tolerance
        self._cache: dict[tuple[int, int], RayTargets] = {}

    def get(self, key: int, ep: EpisodeTruth, frame: int) -> RayTargets:
        k = (key, frame)
        if k not in self._cache:
            self._cache[k] = prepare_targets(ep.geometry, ep.rays[frame], ep.points[frame].points, self.tolerance)
        return self._cache[k]


# -- loss ----------------------------------------------------------------------

def horizon_ray_loss(logits: Tensor, targets: Sequence[RayTargets]) -> tuple[Tensor | None, int]:
    """Mean over horizons of the per-horizon mean ray cross-entropy; horizons without rays drop out.

    Returns ``(None, 0)`` when no horizon has a scorable ray.
    """
    n_f = logits.shape[0]
    vox = int(np.prod(logits.shape[1:]))
    used = [k for k in range(n_f) if len(targets[k])]
    if not used:
        return None, 0
    width = max(targets[k].index.shape[1] for k in used)
    idx, valid, tgt, weight = [], [], [], []
    for k in used:
        t = targets[k]
        pad = width - t.index.shape[1]
        idx.append(np.pad(t.index.astype(np.intp) + k * vox, ((0, 0), (0, pad))))
        valid.append(np.pad(t.valid, ((0, 0), (0, pad))))
        tgt.append(t.target)
        weight.append(np.full(len(t), 1.0 / (len(t) * len(used))))
    idx, valid = np.concatenate(idx), np.concatenate(valid)
    ray_logits = take(logits, idx) * valid.astype(np.float64)
    nll = F.cross_entropy(ray_logits, np.concatenate(tgt), mask=valid, reduction="none")
    return (nll * np.concatenate(weight)).sum(), len(idx)


def pose_targets(ep: EpisodeTruth, frame: int, n_future: int) -> np.ndarray:
    return np.stack([p.as_array() for p in future_poses(ep, frame)[:n_future]])


def history(ep: EpisodeTruth, frame: int, n_hist: int):
    if not (n_hist - 1 <= frame < ep.n_frames):
        raise DataError(f"frame {frame} lacks {n_hist} frames of history in a {ep.n_frames}-frame episode")
    sl = slice(frame - n_hist + 1, frame + 1)
    return ep.grids[sl], ep.poses[sl]


def sample_loss(model: WorldModel, ep: EpisodeTruth, frame: int, targets: Sequence[RayTargets], teacher_forcing: bool):
    """Forward one training sample. Returns ``(total, ray_ce, pose_l1, rays)``; total is None when skipped."""
    cfg = model.config
    grids, poses = history(ep, frame, cfg.n_hist)
    if frame + cfg.n_future >= ep.n_frames:
        raise DataError(f"frame {frame} lacks {cfg.n_future} future frames")
    fut = future_poses(ep, frame)[: cfg.n_future]
    fc: Forecast = model(grids, poses, fut, teacher_forcing=teacher_forcing)
    ce, rays = horizon_ray_loss(fc.logits, targets)
    if ce is None:
        return None, math.nan, math.nan, 0
    total = ce
    pose_val = math.nan
    if fc.poses is not None:
        pose = F.l1_loss(fc.poses, pose_targets(ep, frame, cfg.n_future))
        pose_val = pose.item()
        total = total + pose * cfg.lambda_pose
    return total, ce.item(), pose_val, rays


# -- checkpoints ---------------------------------------------------------------

CKPT_MODEL = "model.json"
CKPT_PARAMS = "params.json"
CKPT_BLOB = "params.bin"


def save_checkpoint(model: WorldModel, out: str | Path, step: int, classes: Sequence) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    geo = model.geometry
    meta = {
        "classes": [{"name": c.name, "is_dynamic": c.is_dynamic} for c in classes],
        "config": model.config.to_dict(),
        "dims": list(geo.dims),
        "range": list(geo.range),
        "step": int(step),
    }
    (out / CKPT_MODEL).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    save_parameters(model.state_dict(), out / CKPT_PARAMS, out / CKPT_BLOB)
    return out


def load_checkpoint(path: str | Path) -> tuple[WorldModel, dict]:
    path = Path(path)
    try:
        meta = json.loads((path / CKPT_MODEL).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    cfg = RunConfig.from_dict(meta["config"])
    geo = GridGeometry(tuple(meta["dims"]), tuple(meta["range"]))
    classes = tuple(ClassInfo(c["name"], c["is_dynamic"]) for c in meta["classes"])
    model = WorldModel(cfg, geo, len(classes))
    model.load_state_dict(load_parameters(path / CKPT_PARAMS))
    meta["classes"] = classes
    return model, meta


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: WorldModel
    trace: list[dict]
    checkpoint: Path | None
    skipped: int


def training_samples(episodes: Sequence[EpisodeTruth], n_hist: int, n_future: int) -> list[tuple[int, int]]:
    out = []
    for i, ep in enumerate(episodes):
        if ep.spec.n_future < n_future:
            raise DataError(f"episode {i} has N_f={ep.spec.n_future} < model N_f={n_future}")
        for t in range(n_hist - 1, ep.n_frames - n_future):
            out.append((i, t))
    if not out:
        raise DataError("no training samples: every episode is shorter than N_h + N_f frames")
    return out


def _check_geometry(episodes: Sequence[EpisodeTruth]) -> None:
    g0, c0 = episodes[0].geometry, episodes[0].classes
    for i, ep in enumerate(episodes[1:], start=1):
        if ep.geometry != g0 or ep.classes != c0:
            raise DataError(f"episode {i} geometry or class table differs from episode 0")


def train(
    config: RunConfig,
    episodes: Sequence[EpisodeTruth],
    out_dir: str | Path | None = None,
    trace_path: str | Path | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train a fresh model on ``episodes``; writes checkpoints and a loss-trace CSV under ``out_dir``."""
    if not episodes:
        raise DataError("no episodes to train on")
    _check_geometry(episodes)
    geo, classes = episodes[0].geometry, episodes[0].classes
    model = WorldModel(config, geo, len(classes))
    params = model.parameters()
    opt = AdamW(
        params, CyclicLR(config.base_lr, config.max_lr, config.cycle_length),
        weight_decay=config.weight_decay, max_norm=config.max_norm,
    )
    samples = training_samples(episodes, config.n_hist, config.n_future)
    cache = TargetCache(config.ray_tolerance)
    rng = np.random.default_rng(config.data_seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if trace_path is None:
            trace_path = out_dir / "loss_trace.csv"
    trace: list[dict] = []
    step = 0
    skipped = 0
    bs = config.batch_size
    done = False
    for epoch in range(config.epochs):
        order = rng.permutation(len(samples))
        for b0 in range(0, len(order), bs):
            batch = [samples[j] for j in order[b0:b0 + bs]]
            opt.zero_grad()
            losses, ces, poses, n_rays, used = [], [], [], 0, 0
            for ei, t in batch:
                ep = episodes[ei]
                tg = [cache.get(ei, ep, t + k) for k in range(1, config.n_future + 1)]
                total, ce, pl, rays = sample_loss(model, ep, t, tg, config.teacher_forcing)
                if total is None:
                    log.warning("step %d: sample (episode %d, frame %d) has no scorable rays, skipped", step, ei, t)
                    continue
                if not math.isfinite(total.item()):
                    raise NumericalFailure(step, total.item())
                (total * (1.0 / len(batch))).backward()
                losses.append(total.item())
                ces.append(ce)
                poses.append(pl)
                n_rays += rays
                used += 1
            row = {"step": step, "epoch": epoch, "sample": b0 // bs, "lr": opt.lr, "rays": n_rays}
            if not used:
                skipped += 1
                row.update(loss="", ray_ce="", pose_l1="", grad_norm="", skipped=1)
                log.warning("step %d skipped: empty ray batch", step)
            else:
                for p in params:
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                norm = opt.step()
                if not math.isfinite(norm):
                    raise NumericalFailure(step, norm)
                row.update(
                    loss=float(np.mean(losses)), ray_ce=float(np.mean(ces)),
                    pose_l1=float(np.mean(poses)) if poses and not math.isnan(poses[0]) else "",
                    grad_norm=norm, skipped=0,
                )
            trace.append(row)
            step += 1
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                save_checkpoint(model, out_dir / f"step_{step:06d}", step, classes)
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if done:
            break
    ckpt = None
    if out_dir is not None:
        ckpt = save_checkpoint(model, out_dir / "final", step, classes)
    if trace_path is not None:
        write_trace(trace, trace_path)
    return TrainResult(model, trace, ckpt, skipped)


def write_trace(trace: list[dict], path: str | Path) -> None:
    def fmt(v):
        return repr(v) if isinstance(v, float) else v

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in trace:
            w.writerow({k: fmt(row[k]) for k in TRACE_FIELDS})
