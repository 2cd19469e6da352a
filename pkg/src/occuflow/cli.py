"""Command-line entry point: gen, train, forecast, eval, corrupt, render-bev.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .metrics import corrupt
from .pipeline.config import RunConfig
from .pipeline.episode_io import list_episodes, read_episode, write_episode
from .pipeline.evaluate import evaluate_dirs, forecast, write_forecast
from .pipeline.train import NumericalFailure, load_checkpoint, train
from .synth import WorldSpec, episode_specs, generate_episode
from .tensor import NumericalError

log = logging.getLogger("occuflow")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _single_thread(enabled: bool):
    if not enabled:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(1)


def cmd_gen(args) -> int:
    base = WorldSpec()
    if args.spec:
        base = WorldSpec.from_dict(json.loads(Path(args.spec).read_text()))
    out = Path(args.out)
    for i, spec in enumerate(episode_specs(base, args.episodes, args.seed)):
        write_episode(generate_episode(spec), out / f"ep_{i:04d}")
    log.info("wrote %d episodes to %s", args.episodes, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    paths = list_episodes(args.data)
    if not paths:
        raise ValueError(f"no episodes under {args.data}")
    episodes = [read_episode(p) for p in paths]
    with _single_thread(args.single_thread):
        res = train(cfg, episodes, out_dir=args.out)
    log.info("trained %d steps (%d skipped); checkpoint %s", len(res.trace), res.skipped, res.checkpoint)
    print(res.checkpoint)
    return EXIT_OK


def _checkpoint_dir(path: str) -> Path:
    p = Path(path)
    if (p / "model.json").is_file():
        return p
    if (p / "final" / "model.json").is_file():
        return p / "final"
    raise ValueError(f"{path} is not a checkpoint directory")


def cmd_forecast(args) -> int:
    model, _ = load_checkpoint(_checkpoint_dir(args.ckpt))
    ep = read_episode(args.episode)
    res = forecast(model, ep, args.frame)
    write_forecast(res, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_dirs(args.pred, args.gt)
    report.write_csv(args.out)
    log.info("average chamfer %.4f (baseline %.4f) over %d episodes", report.average, report.baseline_average, report.episodes)
    return EXIT_OK


def cmd_corrupt(args) -> int:
    paths = list_episodes(args.data)
    if not paths:
        raise ValueError(f"no episodes under {args.data}")
    single = (Path(args.data) / "manifest.json").is_file()
    seeds = np.random.SeedSequence(args.seed)
    for i, path in enumerate(paths):
        ep = read_episode(path)
        frame_seeds = seeds.spawn(1)[0].generate_state(ep.n_frames)
        ep.grids = [
            corrupt(g, args.target_iou, args.target_miou, int(s)) for g, s in zip(ep.grids, frame_seeds)
        ]
        write_episode(ep, Path(args.out) if single else Path(args.out) / path.name)
    return EXIT_OK


def bev_image(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Top-down ``uint8`` image: highest class id in each pillar, scaled to 0..255, row 0 at max y."""
    top = labels.max(axis=2).astype(np.int64)
    gray = (top * 255) // max(num_classes - 1, 1)
    return gray[::-1].astype(np.uint8)


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_render_bev(args) -> int:
    ep = read_episode(args.episode)
    if not (0 <= args.frame < ep.n_frames):
        raise ValueError(f"frame {args.frame} outside [0, {ep.n_frames})")
    write_pgm(bev_image(ep.grids[args.frame].labels, len(ep.classes)), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="occuflow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic episodes")
    g.add_argument("--out", required=True)
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--spec")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a world model")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--single-thread", action="store_true")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("forecast", help="forecast point clouds for one episode")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--episode", required=True)
    f.add_argument("--frame", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_forecast)

    e = sub.add_parser("eval", help="chamfer report of forecasts against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("corrupt", help="degrade episode occupancy to a target IoU/mIoU")
    c.add_argument("--data", required=True)
    c.add_argument("--target-iou", type=float, required=True)
    c.add_argument("--target-miou", type=float)
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_corrupt)

    r = sub.add_parser("render-bev", help="write a top-down PGM of one frame's occupancy")
    r.add_argument("--episode", required=True)
    r.add_argument("--frame", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render_bev)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericalFailure, NumericalError, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError, OSError) as e:
        log.error("invalid input: %s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
