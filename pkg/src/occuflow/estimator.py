"""scikit-learn style wrappers around training, forecasting and input corruption."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .metrics import corrupt
from .pipeline.config import RunConfig
from .pipeline.evaluate import evaluate_forecasts, forecast
from .pipeline.train import train
from .validation import check_episodes, check_fraction, check_grids, check_is_fitted


class OccupancyWorldModel(BaseEstimator):
    """Fit a world model on episodes; predict future point clouds; score by negative chamfer.

    ``overrides`` holds any other :class:`RunConfig` fields.
    """

    def __init__(self, variant="flow", epochs=20, n_hist=4, n_future=6, model_seed=0, data_seed=0, overrides=None):
        self.variant = variant
        self.epochs = epochs
        self.n_hist = n_hist
        self.n_future = n_future
        self.model_seed = model_seed
        self.data_seed = data_seed
        self.overrides = overrides

    def make_config(self) -> RunConfig:
        d = dict(self.overrides or {})
        d.update(
            variant=self.variant, epochs=self.epochs, n_hist=self.n_hist, n_future=self.n_future,
            model_seed=self.model_seed, data_seed=self.data_seed,
        )
        return RunConfig.from_dict(d)

    def fit(self, X, y=None, out_dir=None):
        """``X``: episodes or episode directories. ``y`` is ignored (targets live in the episodes)."""
        episodes = check_episodes(X)
        res = train(self.make_config(), episodes, out_dir=out_dir)
        self.model_ = res.model
        self.trace_ = res.trace
        self.n_skipped_ = res.skipped
        return self

    def _frame(self, ep, frame):
        return self.n_hist - 1 if frame is None else frame

    def predict(self, X, frame=None):
        """One :class:`ForecastResult` per episode, from ``frame`` (default: first full-history frame)."""
        check_is_fitted(self, "model_")
        return [forecast(self.model_, ep, self._frame(ep, frame)) for ep in check_episodes(X)]

    def score(self, X, y=None, frame=None):
        """Negative average chamfer (m²) over episodes and horizons; higher is better."""
        episodes = check_episodes(X)
        names = [f"{i:06d}" for i in range(len(episodes))]
        preds = dict(zip(names, self.predict(episodes, frame)))
        report = evaluate_forecasts(preds, dict(zip(names, episodes)), with_baseline=False)
        return -report.average


class OccupancyCorruptor(BaseEstimator, TransformerMixin):
    """Degrade occupancy grids to a target IoU (and optionally mIoU) against themselves."""

    def __init__(self, target_iou=1.0, target_miou=None, seed=0):
        self.target_iou = target_iou
        self.target_miou = target_miou
        self.seed = seed

    def fit(self, X=None, y=None):
        check_fraction(self.target_iou, "target_iou")
        check_fraction(self.target_miou, "target_miou", allow_none=True)
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self, "fitted_")
        grids = check_grids(X)
        seeds = np.random.SeedSequence(self.seed).generate_state(max(len(grids), 1))
        return [corrupt(g, self.target_iou, self.target_miou, int(s)) for g, s in zip(grids, seeds)]
