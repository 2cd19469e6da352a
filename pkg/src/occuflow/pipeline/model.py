"""The forecasting network: encoders, temporal transformer and the two decoding variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoding import EgoEncoder, OccupancyEncoder, ego_displacements, unpatchify
from ..flowwarp import Refiner, build_decouple_mask, forecast_features
from ..geometry import GridGeometry, PoseSE2, SemanticOccupancyGrid
from ..salt import FlowDecoder, OccupancyHead, SpatialTemporalEncoder, VanillaDecoder
from ..tensor import Tensor, reshape
from ..tensor.functional import ShapeError
from ..tensor.nn import Linear, Module
from .config import RunConfig


def constant_motion(step, n: int) -> np.ndarray:
    """``[n, 3]`` poses of frames ``T+1..T+n`` in frame ``T`` when the last displacement repeats."""
    d = PoseSE2(*np.asarray(step, dtype=np.float64))
    out = np.zeros((n, 3))
    p = PoseSE2.identity()
    for k in range(n):
        p = p.compose(d)
        out[k] = (p.x, p.y, (k + 1) * d.yaw)
    return out


@dataclass
class Forecast:
    logits: Tensor  # [N_f, H0, W0, D0]
    poses: Tensor | None  # [N_f, 3] predicted (dx, dy, dyaw) of T+k in frame T
    flow: Tensor | None  # [N_f, H0, W0, 2]


class WorldModel(Module):
    """Occupancy history and ego motion in, future occupancy logits out, in one pass.

    Both variants share the encoders, the temporal transformer and a
    full-resolution feature path: decoder features lifted from patch
    resolution plus a projection of the last observed frame's embedding.
    The ``flow`` variant warps those features into each future frame with
    decoupled dynamic flow and ego poses (a learned correction on top of
    repeating the last observed displacement); the ``vanilla`` variant decodes
    learned future queries and applies no warping.
    """

    def __init__(self, config: RunConfig, geometry: GridGeometry, num_classes: int):
        rng = np.random.default_rng(config.model_seed)
        h0, w0, d0 = geometry.dims
        c, p, cw = config.channels, config.patch, config.warp_channels
        if h0 % p or w0 % p:
            raise ShapeError(f"patch size {p} does not divide BEV extent {h0}x{w0}")
        ffn = config.ffn_mult * c
        self.config = config
        self.geometry = geometry
        self.occ_encoder = OccupancyEncoder(rng, num_classes, d0, config.embed_dim, c, p, config.groups)
        self.ego_encoder = EgoEncoder(rng, c)
        self.encoder = SpatialTemporalEncoder(rng, c, config.heads, ffn, config.groups, config.n_enc)
        if config.variant == "flow":
            self.decoder = FlowDecoder(
                rng, c, config.heads, ffn, config.groups, config.n_dec, config.n_future, p,
                geometry.pitch[0], config.pose_scale,
            )
        else:
            self.decoder = VanillaDecoder(
                rng, c, config.heads, ffn, config.groups, config.n_dec, config.n_future, (h0 // p, w0 // p)
            )
        self.lift = Linear(rng, c, p * p * cw)
        self.skip = Linear(rng, d0 * config.embed_dim, cw)
        self.refiner = Refiner(rng, cw, config.groups)
        self.head = OccupancyHead(rng, cw, d0, 1, (h0, w0))

    @property
    def n_future(self) -> int:
        return self.config.n_future

    def forward(
        self,
        history: list[SemanticOccupancyGrid],
        history_poses: list[PoseSE2],
        future_poses: list[PoseSE2] | None = None,
        teacher_forcing: bool = False,
    ) -> Forecast:
        """Forecast ``N_f`` frames after the last history frame.

        With ``teacher_forcing`` the flow variant warps with ``future_poses``
        (ground truth) instead of its own predictions.
        """
        cfg = self.config
        if len(history) != cfg.n_hist or len(history_poses) != cfg.n_hist:
            raise ShapeError(f"expected {cfg.n_hist} history frames, got {len(history)} grids and {len(history_poses)} poses")
        labels = np.stack([g.labels for g in history])
        disp = ego_displacements(history_poses)
        tokens = self.occ_encoder(labels)
        h = self.encoder(tokens, self.ego_encoder(disp))
        p = cfg.patch
        skip = self.skip(self.occ_encoder.bev_embedding(labels[-1:]))  # [1, H0, W0, C_w]
        if cfg.variant == "flow":
            flow, poses, last = self.decoder(h)
            poses = poses + Tensor(constant_motion(disp[-1], cfg.n_future))
            current = unpatchify(self.lift(last), p) + reshape(skip, skip.shape[1:])
            if teacher_forcing:
                if future_poses is None:
                    raise ValueError("teacher forcing needs ground-truth future poses")
                warp_poses = list(future_poses)
            else:
                warp_poses = poses
            mask = build_decouple_mask(history[-1])
            feats = forecast_features(current, flow, warp_poses, mask, self.refiner, self.geometry)
            return Forecast(self.head(feats), poses, flow)
        out = self.decoder(h)  # [N_f, H, W, C]
        feats = self.refiner(unpatchify(self.lift(out), p) + skip)
        return Forecast(self.head(feats), None, None)
