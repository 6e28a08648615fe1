"""Experiment configuration: one structured file, flat CLI overrides.

YAML keys mirror dataclass fields; a few *_deg conveniences are accepted
for angular quantities. Validation happens in the dataclass constructors.
"""

from __future__ import annotations

import math
from dataclasses import MISSING, dataclass, field, fields, is_dataclass, replace

import yaml

from .fusion import FusionConfig
from .mpc import MpcConfig
from .odometry import OdometryConfig
from .pano_depth import DEFAULT_BOUNDS, DEFAULT_MIN_RANGE, DEFAULT_VOXEL
from .scene_sim import LidarModel


@dataclass
class PanoConfig:
    width: int = 360
    height: int = 90
    bounds: tuple = DEFAULT_BOUNDS
    min_range: float = DEFAULT_MIN_RANGE
    voxel: float = DEFAULT_VOXEL

    def __post_init__(self) -> None:
        self.bounds = tuple(float(b) for b in self.bounds)
        if len(self.bounds) != 4:
            raise ValueError("bounds must be (alpha_min, alpha_max, beta_min, beta_max)")


@dataclass
class ScoreConfig:
    delta_theta: float = math.radians(10.0)
    epsilon: float = 1e-3


@dataclass
class ExperimentConfig:
    scene: str = "campus"
    trajectory: str | None = None  # required when scene is a file path
    osm: str | None = None  # OSM XML path; default derives from the scene
    dem: str | None = None  # ESRI grid path; default derives from the scene
    strategy: str = "adaptive"
    seed: int = 0
    osm_dropout: float = 0.0
    frames: int | None = None
    out: str | None = None
    static_theta: float = 0.0
    control_period: int = 3
    prior_clip: float | None = None  # defaults to the sensor max range
    origin: tuple = (0.0, 0.0)
    dump_diagnostics: bool = False
    lidar: LidarModel = field(default_factory=LidarModel)
    pano: PanoConfig = field(default_factory=PanoConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    facade_spacing: float = 0.5
    ground_spacing: float = 2.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.osm_dropout <= 1.0:
            raise ValueError("osm_dropout must lie in [0, 1]")
        parse_strategy(self.strategy)
        self.origin = tuple(float(v) for v in self.origin)


def parse_strategy(spec: str):
    """-> ("static", None) | ("constant", omega) | ("adaptive", None)."""
    if spec == "static":
        return "static", None
    if spec == "adaptive":
        return "adaptive", None
    if spec.startswith("constant:"):
        try:
            omega = float(spec.split(":", 1)[1])
        except ValueError as exc:
            raise ValueError("bad constant strategy %r" % spec) from exc
        if omega <= 0.0:
            raise ValueError("constant strategy needs a positive speed")
        return "constant", omega
    raise ValueError("strategy must be static, constant:<omega>, or adaptive")


_DEG_KEYS = {
    "h_fov_deg": "h_fov",
    "v_fov_deg": "v_fov",
    "delta_theta_deg": "delta_theta",
    "static_theta_deg": "static_theta",
}


def _normalize(data: dict) -> dict:
    out = {}
    for key, val in data.items():
        if key in _DEG_KEYS:
            out[_DEG_KEYS[key]] = math.radians(float(val))
        elif key == "bounds_deg":
            out["bounds"] = tuple(math.radians(float(v)) for v in val)
        elif isinstance(val, dict):
            out[key] = _normalize(val)
        else:
            out[key] = val
    return out


def _build(cls, data: dict):
    kwargs = {}
    known = {f.name: f for f in fields(cls)}
    for key, val in data.items():
        if key not in known:
            raise ValueError("unknown config key %r for %s" % (key, cls.__name__))
        if isinstance(val, dict) and known[key].default_factory is not MISSING:
            base = known[key].default_factory()
            if is_dataclass(base):
                kwargs[key] = _build(type(base), val)
                continue
        kwargs[key] = tuple(val) if isinstance(val, list) else val
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = _normalize(dict(data or {}))
    explicit_dt = "mpc" in data and "dt" in data["mpc"]
    cfg = _build(ExperimentConfig, data)
    if not explicit_dt:
        cfg.mpc = replace(cfg.mpc, dt=1.0 / cfg.lidar.frame_rate)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as f:
        return config_from_dict(yaml.safe_load(f))


def apply_overrides(
    cfg: ExperimentConfig,
    strategy: str | None = None,
    seed: int | None = None,
    osm_dropout: float | None = None,
    out: str | None = None,
    frames: int | None = None,
) -> ExperimentConfig:
    updates = {}
    if strategy is not None:
        updates["strategy"] = strategy
    if seed is not None:
        updates["seed"] = seed
    if osm_dropout is not None:
        updates["osm_dropout"] = osm_dropout
    if out is not None:
        updates["out"] = out
    if frames is not None:
        updates["frames"] = frames
    return replace(cfg, **updates) if updates else cfg
