"""Occupancy world model: forecast future point clouds from semantic occupancy history and ego motion."""

from .estimator import OccupancyCorruptor, OccupancyWorldModel
from .geometry import GridGeometry, PointCloud, PoseSE2, RaySet, SemanticOccupancyGrid
from .pipeline.config import RunConfig
from .synth import EpisodeTruth, WorldSpec, generate_episode

__version__ = "0.1.0"

__all__ = [
    "EpisodeTruth",
    "GridGeometry",
    "OccupancyCorruptor",
    "OccupancyWorldModel",
    "PointCloud",
    "PoseSE2",
    "RaySet",
    "RunConfig",
    "SemanticOccupancyGrid",
    "WorldSpec",
    "generate_episode",
]
