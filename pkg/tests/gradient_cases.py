"""Builders for the finite-difference suite: ``case(seed) -> (fn, inputs, max_entries)``.

Zero-initialized residual projections are randomized first, otherwise the
checks would pass trivially on identity branches.
"""

import numpy as np

from occuflow.encoding import EgoEncoder, OccupancyEncoder
from occuflow.flowwarp import Refiner, forecast_features, merge_and_refine, warp_dynamic, warp_static
from occuflow.geometry import GridGeometry, RaySet
from occuflow.render import gather_ray_logits, ray_ce_loss, ray_samples, render_depth
from occuflow.salt import FlowDecoder, OccupancyHead, SaltBlock, SpatialTemporalEncoder, VanillaDecoder
from occuflow.tensor import Tensor, relu, sigmoid, silu
from occuflow.tensor import functional as F


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = rng.standard_normal(p.shape) * scale
    return module


def leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def conv2d(seed):
    r = np.random.default_rng(seed)
    x, w, b = leaf(r, (2, 3, 5, 5)), leaf(r, (2, 3, 3, 3)), leaf(r, (2,))
    return (lambda x, w, b: F.conv2d(x, w, b, padding=1)), [x, w, b], None


def conv2d_strided(seed):
    r = np.random.default_rng(seed)
    x, w = leaf(r, (1, 2, 5, 5)), leaf(r, (3, 2, 3, 3))
    return (lambda x, w: F.conv2d(x, w, stride=2, padding=1)), [x, w], None


def conv3d(seed):
    r = np.random.default_rng(seed)
    x, w, b = leaf(r, (1, 2, 3, 4, 4)), leaf(r, (2, 2, 3, 3, 3)), leaf(r, (2,))
    return (lambda x, w, b: F.conv3d(x, w, b, padding=1)), [x, w, b], None


def group_norm(seed):
    r = np.random.default_rng(seed)
    x, g, b = leaf(r, (2, 4, 3, 3)), leaf(r, (4,)), leaf(r, (4,))
    return (lambda x, g, b: F.group_norm(x, 2, g, b)), [x, g, b], None


def attention(seed):
    r = np.random.default_rng(seed)
    q, k, v = leaf(r, (2, 3, 4)), leaf(r, (2, 4, 4)), leaf(r, (2, 4, 4))
    wo, bo = leaf(r, (4, 4)), leaf(r, (4,))
    return (lambda q, k, v, wo, bo: F.multi_head_attention(q, k, v, 2, wo, bo)), [q, k, v, wo, bo], None


def _away_from_kink(r, shape):
    x = r.standard_normal(shape)
    return Tensor(np.where(np.abs(x) < 0.05, 0.5, x), requires_grad=True)


def activation_relu(seed):
    return relu, [_away_from_kink(np.random.default_rng(seed), (4, 5))], None


def activation_silu(seed):
    return silu, [leaf(np.random.default_rng(seed), (4, 5))], None


def activation_sigmoid(seed):
    return sigmoid, [leaf(np.random.default_rng(seed), (4, 5))], None


def softmax(seed):
    return (lambda x: F.softmax(x, axis=-1)), [leaf(np.random.default_rng(seed), (3, 5))], None


def cross_entropy(seed):
    r = np.random.default_rng(seed)
    t = r.integers(0, 5, 4)
    return (lambda x: F.cross_entropy(x, t)), [leaf(r, (4, 5), 2.0)], None


def l1_loss(seed):
    r = np.random.default_rng(seed)
    target = r.standard_normal((3, 4))
    x = target + np.where(r.random((3, 4)) < 0.5, -1, 1) * r.uniform(0.1, 1, (3, 4))
    return (lambda x: F.l1_loss(x, target)), [Tensor(x, requires_grad=True)], None


def linear(seed):
    r = np.random.default_rng(seed)
    x, w, b = leaf(r, (3, 4)), leaf(r, (2, 4)), leaf(r, (2,))
    return F.linear, [x, w, b], None


def grid_sample(seed):
    r = np.random.default_rng(seed)
    feat = leaf(r, (5, 6, 2))
    # stay off integer coordinates where bilinear weights have kinks
    ix = Tensor(r.uniform(0.1, 4.4, (3, 4)) + 0.013, requires_grad=True)
    iy = Tensor(r.uniform(0.1, 3.4, (3, 4)) + 0.017, requires_grad=True)
    return (lambda f, a, b: F.grid_sample(f, a, b)[0]), [feat, ix, iy], None


def salt_block(seed):
    r = np.random.default_rng(seed)
    block = randomize(SaltBlock(r, 8, 2, 8, 2), r)
    x = leaf(r, (2, 4, 4, 8))
    return (lambda x, *ps: block(x)), [x] + block.parameters(), 12


def salt_encoder(seed):
    r = np.random.default_rng(seed)
    enc = randomize(SpatialTemporalEncoder(r, 4, 2, 4, 2, 1), r)
    tok, ego = leaf(r, (3, 2, 2, 4)), leaf(r, (3, 4))
    return (lambda t, e: enc(t, e)), [tok, ego], None


def flow_decode(seed):
    r = np.random.default_rng(seed)
    dec = randomize(FlowDecoder(r, 4, 2, 4, 2, 1, 2, 2, 0.4), r)
    h = leaf(r, (2, 2, 2, 4))

    def fn(h):
        flow, poses, _ = dec(h)
        return (flow * flow).sum() + (poses * poses).sum()

    return fn, [h], None


def vanilla_decode(seed):
    r = np.random.default_rng(seed)
    dec = randomize(VanillaDecoder(r, 4, 2, 4, 2, 1, 2, (2, 2)), r)
    h = leaf(r, (3, 2, 2, 4))
    return (lambda h, *ps: dec(h)), [h] + dec.parameters(), 8


def occupancy_head(seed):
    r = np.random.default_rng(seed)
    head = randomize(OccupancyHead(r, 4, 2, 2, (4, 4)), r)
    x = leaf(r, (2, 2, 4))
    return (lambda x, *ps: head(x)), [x] + head.parameters(), None


def occupancy_encoder(seed):
    r = np.random.default_rng(seed)
    occ = OccupancyEncoder(r, 4, 2, 2, 4, 2, 2)
    labels = r.integers(0, 4, (2, 4, 4, 2))
    return (lambda *ps: occ(labels)), occ.parameters(), 10


def ego_encoder(seed):
    r = np.random.default_rng(seed)
    ego = EgoEncoder(r, 4)
    disp = r.standard_normal((3, 3))
    return (lambda *ps: ego(disp)), ego.parameters(), None


WARP_GEO = GridGeometry((6, 6, 1), (-1.2, -1.2, 0.0, 1.2, 1.2, 0.4))
_MARGIN = 0.02  # index units; finite-difference steps move samples by < 0.005


def _index_coords(px, py, geo=WARP_GEO):
    pitch = geo.pitch
    return (px - geo.range[0]) / pitch[0] - 0.5, (py - geo.range[1]) / pitch[1] - 0.5


def _smooth(ix, iy, geo=WARP_GEO):
    """Away from bilinear kinks (integers) and from the zero-fill edge (-0.5 / n - 0.5)."""
    h, w, _ = geo.dims
    ok = True
    for v, n in ((ix, w), (iy, h)):
        v = np.asarray(v)
        ok &= bool(np.all(np.abs(v - np.round(v)) > _MARGIN))
        ok &= bool(np.all((np.abs(v + 0.5) > _MARGIN) & (np.abs(v - (n - 0.5)) > _MARGIN)))
    return ok


def _warp_coords(pose, flow=None):
    from occuflow.flowwarp import ego_sample_points
    from occuflow.tensor import no_grad

    with no_grad():
        px, py = ego_sample_points(WARP_GEO, Tensor(pose))
    coords = [_index_coords(px.data, py.data)]
    if flow is not None:
        fx, fy = _bilinear_np(flow, *coords[0])
        coords.append(_index_coords(px.data + fx, py.data + fy))
    return coords


def _bilinear_np(field, ix, iy):
    from occuflow.tensor import no_grad

    with no_grad():
        out, _ = F.grid_sample(Tensor(field), Tensor(ix), Tensor(iy))
    return out.data[..., 0], out.data[..., 1]


def _draw(r, with_flow):
    for _ in range(10_000):
        pose = np.array([r.uniform(-0.15, 0.15), r.uniform(-0.15, 0.15), r.uniform(-0.3, 0.3)])
        flow = r.uniform(-0.15, 0.15, (6, 6, 2)) if with_flow else None
        if all(_smooth(*c) for c in _warp_coords(pose, flow)):
            return pose, flow
    raise RuntimeError("no smooth warp configuration found")


def warp_static_op(seed):
    r = np.random.default_rng(seed)
    feat = leaf(r, (6, 6, 2))
    pose, _ = _draw(r, False)
    return (lambda f, p: warp_static(f, p, WARP_GEO)[0]), [feat, Tensor(pose, requires_grad=True)], None


def warp_dynamic_op(seed):
    r = np.random.default_rng(seed)
    feat = leaf(r, (6, 6, 2))
    pose, flow = _draw(r, True)
    inputs = [feat, Tensor(flow, requires_grad=True), Tensor(pose, requires_grad=True)]
    return (lambda f, fl, p: warp_dynamic(f, fl, p, WARP_GEO)[0]), inputs, None


def merge_refine(seed):
    r = np.random.default_rng(seed)
    ref = randomize(Refiner(r, 4, 2), r)
    s, d = leaf(r, (4, 4, 4)), leaf(r, (4, 4, 4))
    m = (r.random((4, 4)) < 0.4).astype(float)
    return (lambda s, d, *ps: merge_and_refine(s, d, m, ref)), [s, d] + ref.parameters(), 10


def forecast_feats(seed):
    r = np.random.default_rng(seed)
    ref = randomize(Refiner(r, 2, 1), r)
    cur = leaf(r, (6, 6, 2))
    draws = [_draw(r, True) for _ in range(2)]
    flow = Tensor(np.stack([f for _, f in draws]), requires_grad=True)
    poses = Tensor(np.stack([p for p, _ in draws]), requires_grad=True)
    mask = r.random((6, 6)) < 0.3
    return (lambda c, f, p: forecast_features(c, f, p, mask, ref, WARP_GEO)), [cur, flow, poses], None


RENDER_GEO = GridGeometry((4, 4, 2), (-1.6, -1.6, 0.0, 1.6, 1.6, 0.8))


def _render_rays(r, n=6):
    d = r.standard_normal((n, 3))
    d[:, 2] = r.uniform(-0.2, 0.05, n)
    return RaySet.normalized((0.05, -0.03, 0.5), d)


def gather(seed):
    r = np.random.default_rng(seed)
    s = ray_samples(RENDER_GEO, _render_rays(r))
    return (lambda z: gather_ray_logits(z, s)), [leaf(r, (4, 4, 2))], None


def depth(seed):
    r = np.random.default_rng(seed)
    s = ray_samples(RENDER_GEO, _render_rays(r))
    return (lambda z: render_depth(gather_ray_logits(z, s), s.depth, s.valid)), [leaf(r, (4, 4, 2))], None


def ray_ce(seed):
    r = np.random.default_rng(seed)
    s = ray_samples(RENDER_GEO, _render_rays(r))
    s = s.subset(s.hit)
    pick = [r.integers(c) for c in s.counts]
    gt = np.array([s.depth[i, j] for i, j in enumerate(pick)])
    return (lambda z: ray_ce_loss(gather_ray_logits(z, s), s.depth, gt, s.valid)), [leaf(r, (4, 4, 2))], None


CASES = {
    "conv2d": conv2d,
    "conv2d_strided": conv2d_strided,
    "conv3d": conv3d,
    "group_norm": group_norm,
    "attention": attention,
    "relu": activation_relu,
    "silu": activation_silu,
    "sigmoid": activation_sigmoid,
    "softmax": softmax,
    "cross_entropy": cross_entropy,
    "l1_loss": l1_loss,
    "linear": linear,
    "grid_sample": grid_sample,
    "salt_block": salt_block,
    "salt_encoder": salt_encoder,
    "flow_decode": flow_decode,
    "vanilla_decode": vanilla_decode,
    "occupancy_head": occupancy_head,
    "occupancy_encoder": occupancy_encoder,
    "ego_encoder": ego_encoder,
    "warp_static": warp_static_op,
    "warp_dynamic": warp_dynamic_op,
    "merge_refine": merge_refine,
    "forecast_features": forecast_feats,
    "gather_ray_logits": gather,
    "render_depth": depth,
    "ray_ce_loss": ray_ce,
}
