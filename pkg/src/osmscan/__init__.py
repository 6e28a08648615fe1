"""Adaptive LiDAR scanning on a spinning motor, guided by map priors.

The package simulates a motor-mounted scanner moving through synthetic
scenes, builds an observability prior from building footprints and a
terrain grid, scores candidate view directions, plans motor speeds over a
short horizon, and closes the loop with scan odometry plus map-anchored
drift correction.
"""

from .cloud import WeightedCloud, load_cloud, save_cloud
from .config import ExperimentConfig, load_config
from .geometry import PoseSE3, TwistSE3
from .pipeline import RunResult, compare_strategies, run_experiment

__all__ = [
    "ExperimentConfig",
    "PoseSE3",
    "RunResult",
    "TwistSE3",
    "WeightedCloud",
    "compare_strategies",
    "load_cloud",
    "load_config",
    "run_experiment",
    "save_cloud",
]

__version__ = "0.1.0"
