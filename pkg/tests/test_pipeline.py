import csv
import math
from dataclasses import replace

import numpy as np
import pytest

from occuflow.geometry import PointCloud, PoseSE2, RaySet
from occuflow.pipeline.config import ConfigError, RunConfig
from occuflow.pipeline.episode_io import EpisodeFormatError, list_episodes, read_episode, write_episode
from occuflow.pipeline.evaluate import (
    EvalReport,
    ForecastResult,
    baseline_forecast,
    evaluate_dirs,
    evaluate_forecasts,
    forecast,
    read_forecast,
    write_forecast,
)
from occuflow.pipeline.model import WorldModel, constant_motion
from occuflow.pipeline.train import (
    DataError,
    NumericalFailure,
    load_checkpoint,
    save_checkpoint,
    train,
    training_samples,
)
from occuflow.synth import WorldSpec, episode_specs, generate_episode

SMALL = dict(channels=16, warp_channels=8, heads=2, n_enc=1, n_dec=1, epochs=2)


def small(**kw):
    return RunConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def episodes():
    return [generate_episode(s) for s in episode_specs(WorldSpec(), 3, 42)]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- config --------------------------------------------------------------------

@pytest.mark.parametrize(
    "kw",
    [dict(variant="gru"), dict(base_lr=0.0), dict(max_lr=1e-5), dict(heads=3), dict(lambda_pose=-1.0), dict(epochs=0)],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        RunConfig(**kw)


def test_config_json_roundtrip(tmp_path):
    cfg = small(variant="vanilla", lambda_pose=0.5)
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert cfg.digest() == RunConfig.from_dict(cfg.to_dict()).digest()
    assert cfg.digest() != small().digest()


def test_config_unknown_field(tmp_path):
    (tmp_path / "c.json").write_text('{"chanels": 8}')
    with pytest.raises(ConfigError, match="chanels"):
        RunConfig.load(tmp_path / "c.json")
    (tmp_path / "d.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "d.json")


# -- episode format ----------------------------------------------------------------

def test_episode_roundtrip_bytes(tmp_path, episodes):
    a = write_episode(episodes[0], tmp_path / "a")
    b = write_episode(read_episode(a), tmp_path / "b")
    assert tree_bytes(a) == tree_bytes(b)


def test_episode_layout(tmp_path, episodes):
    ep = episodes[0]
    out = write_episode(ep, tmp_path / "e")
    raw = (out / "frames" / "frame_0000.occ").read_bytes()
    h, w, d = ep.geometry.dims
    assert len(raw) == h * w * d
    z, y, x = 2, 5, 7
    assert raw[((z * h) + y) * w + x] == ep.grids[0].labels[y, x, z]
    rays = np.frombuffer((out / "rays" / "frame_0000.bin").read_bytes(), "<f4")
    assert len(rays) == 3 + 3 * len(ep.rays[0])
    rows = list(csv.reader((out / "poses.csv").read_text().splitlines()))
    assert rows[0] == ["frame", "x", "y", "yaw"] and len(rows) == ep.n_frames + 1
    assert len(list((out / "flow").iterdir())) == len(ep.flows)


def test_episode_reader_diagnostics(tmp_path, episodes):
    out = write_episode(episodes[0], tmp_path / "e")
    (out / "points" / "frame_0003.bin").unlink()
    with pytest.raises(EpisodeFormatError, match="missing"):
        read_episode(out)
    with pytest.raises(EpisodeFormatError):
        read_episode(tmp_path / "nothing")


def test_list_episodes(tmp_path, episodes):
    for i, ep in enumerate(episodes[:2]):
        write_episode(ep, tmp_path / f"ep_{i:04d}")
    (tmp_path / "junk").mkdir()
    assert [p.name for p in list_episodes(tmp_path)] == ["ep_0000", "ep_0001"]
    assert list_episodes(tmp_path / "ep_0001") == [tmp_path / "ep_0001"]


# -- model -----------------------------------------------------------------------

def test_constant_motion_straight_line():
    np.testing.assert_allclose(constant_motion([0.5, 0.0, 0.0], 3), [[0.5, 0, 0], [1.0, 0, 0], [1.5, 0, 0]])


def test_constant_motion_arc_matches_composition():
    step = PoseSE2(0.4, 0.1, 0.05)
    out = constant_motion(step.as_array(), 4)
    p = PoseSE2.identity()
    for k in range(4):
        p = p.compose(step)
        np.testing.assert_allclose(out[k], [p.x, p.y, (k + 1) * 0.05], atol=1e-12)


def test_model_rejects_bad_patch(episodes):
    with pytest.raises(ValueError, match="patch"):
        WorldModel(small(patch=5), episodes[0].geometry, 4)


# -- training --------------------------------------------------------------------

def test_training_loss_decreases(episodes):
    res = train(small(epochs=2, max_lr=5e-3, cycle_length=2), episodes[:1])
    losses = [r["loss"] for r in res.trace]
    assert len(losses) == 2 and losses[-1] < losses[0]


def test_pose_head_frozen_without_pose_loss(episodes):
    res = train(small(lambda_pose=0.0, teacher_forcing=True, epochs=1), episodes[:2])
    fresh = WorldModel(res.model.config, episodes[0].geometry, 4).state_dict()
    trained = res.model.state_dict()
    for name in ("decoder.pose_head.weight", "decoder.pose_head.bias"):
        np.testing.assert_array_equal(trained[name], fresh[name])
    # everything else did move
    assert not np.array_equal(trained["decoder.flow_head.weight"], fresh["decoder.flow_head.weight"])


def test_training_deterministic(tmp_path, episodes):
    a = train(small(epochs=1), episodes[:2], out_dir=tmp_path / "a")
    b = train(small(epochs=1), episodes[:2], out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "loss_trace.csv").read_bytes() == (tmp_path / "b" / "loss_trace.csv").read_bytes()
    assert tree_bytes(a.checkpoint) == tree_bytes(b.checkpoint)


def test_trace_columns(tmp_path, episodes):
    train(small(epochs=1, variant="vanilla"), episodes[:1], out_dir=tmp_path)
    rows = list(csv.DictReader((tmp_path / "loss_trace.csv").read_text().splitlines()))
    assert rows[0]["pose_l1"] == "" and float(rows[0]["loss"]) == float(rows[0]["ray_ce"])


def test_periodic_checkpoints(tmp_path, episodes):
    train(small(epochs=2, checkpoint_every=1), episodes[:1], out_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir() if p.is_dir()) == ["final", "step_000001", "step_000002"]


def test_checkpoint_roundtrip_bytes(tmp_path, episodes):
    res = train(small(epochs=1), episodes[:1], out_dir=tmp_path / "run")
    model, meta = load_checkpoint(res.checkpoint)
    again = save_checkpoint(model, tmp_path / "again", meta["step"], meta["classes"])
    assert tree_bytes(res.checkpoint) == tree_bytes(again)


def test_nan_loss_aborts_with_step(episodes):
    ep = episodes[0]
    bad = replace(ep, poses=[PoseSE2(math.nan, 0.0, 0.0)] + list(ep.poses[1:]))
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericalFailure) as info:
            train(small(epochs=1), [bad])
    assert info.value.step == 0


def test_empty_ray_batch_skipped(episodes):
    ep = episodes[0]
    t = ep.forecast_frames()[0]
    rays, points = list(ep.rays), list(ep.points)
    for k in range(1, 7):
        rays[t + k] = RaySet(ep.rays[t + k].origin, np.zeros((0, 3)))
        points[t + k] = PointCloud(np.zeros((0, 3)))
    res = train(small(epochs=1), [replace(ep, rays=rays, points=points)])
    assert res.skipped == 1 and res.trace[0]["skipped"] == 1


def test_training_rejects(episodes):
    with pytest.raises(DataError):
        train(small(), [])
    with pytest.raises(DataError, match="N_f"):
        training_samples(episodes, 4, 7)


# -- forecasting and evaluation ------------------------------------------------------

def test_forecast_zero_model(episodes):
    ep = episodes[1]
    model = WorldModel(small(), ep.geometry, 4)
    for p in model.parameters():
        p.data[...] = 0.0
    res = forecast(model, ep, 3)
    assert len(res.clouds) == 6 and res.poses.shape == (6, 3)
    for k, pc in enumerate(res.clouds):
        assert len(pc) == len(ep.rays[4 + k])
        assert np.isfinite(pc.points).all()


def test_forecast_needs_rays(episodes):
    model = WorldModel(small(), episodes[0].geometry, 4)
    with pytest.raises(DataError):
        forecast(model, episodes[0], 5)
    with pytest.raises(DataError):
        forecast(model, episodes[0], 1)


def gt_forecast(ep, frame=3):
    return ForecastResult(frame, [ep.points[frame + k] for k in range(1, 7)], None)


def test_eval_perfect_prediction(episodes):
    names = ["a", "b", "c"]
    rep = evaluate_forecasts({n: gt_forecast(e) for n, e in zip(names, episodes)}, dict(zip(names, episodes)))
    assert rep.chamfer == [0.0] * 6 and rep.average == 0.0
    assert rep.valid_ray_fraction == 1.0 and rep.episodes == 3
    assert all(b > 0 for b in rep.baseline)


def test_eval_order_independent(episodes):
    names = ["a", "b", "c"]
    model = WorldModel(small(), episodes[0].geometry, 4)
    preds = {n: forecast(model, e, 3) for n, e in zip(names, episodes)}
    truth = dict(zip(names, episodes))
    r1 = evaluate_forecasts(preds, truth)
    r2 = evaluate_forecasts(dict(reversed(list(preds.items()))), dict(reversed(list(truth.items()))))
    assert r1.rows() == r2.rows()


def test_eval_rejects_mismatch(episodes):
    with pytest.raises(DataError, match="differ"):
        evaluate_forecasts({"a": gt_forecast(episodes[0])}, {"a": episodes[0], "b": episodes[1]})
    short = ForecastResult(3, gt_forecast(episodes[1]).clouds[:4], None)
    with pytest.raises(DataError, match="horizon"):
        evaluate_forecasts({"a": gt_forecast(episodes[0]), "b": short}, {"a": episodes[0], "b": episodes[1]})


def test_report_csv(tmp_path):
    rep = EvalReport([1.0, 2.0, 4.0], [2.0, 2.0, 2.0], 0.97, 5)
    rep.write_csv(tmp_path / "r.csv")
    rows = list(csv.DictReader((tmp_path / "r.csv").read_text().splitlines()))
    assert [r["horizon"] for r in rows] == ["1", "2", "3", "Avg"] * 2
    model = [float(r["chamfer"]) for r in rows if r["method"] == "model"]
    assert abs(model[-1] - np.mean(model[:-1])) <= 1e-9
    assert rows[0]["time_s"] == "0.5" and rows[2]["time_s"] == "1.5"


def test_forecast_dir_roundtrip_and_eval(tmp_path, episodes):
    for i, ep in enumerate(episodes[:2]):
        write_episode(ep, tmp_path / "gt" / f"ep_{i}")
        write_forecast(gt_forecast(ep), tmp_path / "pred" / f"ep_{i}")
    back = read_forecast(tmp_path / "pred" / "ep_0")
    assert back.frame == 3 and len(back.clouds) == 6
    rep = evaluate_dirs(tmp_path / "pred", tmp_path / "gt")
    # float32 storage of both sides keeps identical clouds identical
    assert rep.chamfer == [0.0] * 6 and rep.episodes == 2


def test_baseline_poses_are_ground_truth(episodes):
    ep = episodes[0]
    b = baseline_forecast(ep, 3, 6)
    assert len(b.clouds) == 6 and b.poses.shape == (6, 3)
    rel = ep.poses[3].inverse().compose(ep.poses[9])
    np.testing.assert_allclose(b.poses[-1], rel.as_array(), atol=1e-12)
