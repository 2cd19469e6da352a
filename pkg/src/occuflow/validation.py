"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from numbers import Real
from pathlib import Path
from typing import Iterable

from .geometry import SemanticOccupancyGrid
from .synth import EpisodeTruth


def check_fraction(value, name: str, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if not isinstance(value, Real) or not (0.0 < float(value) <= 1.0):
        raise ValueError(f"{name} must be in (0, 1], got {value!r}")
    return float(value)


def check_episodes(X) -> list[EpisodeTruth]:
    """Accept episodes, episode directories or a root holding episode directories."""
    from .pipeline.episode_io import list_episodes, read_episode

    if isinstance(X, (str, Path)):
        X = list_episodes(X)
    items = list(X)
    if not items:
        raise ValueError("expected at least one episode")
    out = []
    for i, item in enumerate(items):
        if isinstance(item, EpisodeTruth):
            out.append(item)
        elif isinstance(item, (str, Path)):
            out.append(read_episode(item))
        else:
            raise TypeError(f"item {i} is {type(item).__name__}, not an episode or a path")
    return out


def check_grids(X: Iterable) -> list[SemanticOccupancyGrid]:
    grids = list(X)
    for i, g in enumerate(grids):
        if not isinstance(g, SemanticOccupancyGrid):
            raise TypeError(f"item {i} is {type(g).__name__}, not a SemanticOccupancyGrid")
    return grids


def check_is_fitted(est, attr: str) -> None:
    from sklearn.exceptions import NotFittedError

    if getattr(est, attr, None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit first")
