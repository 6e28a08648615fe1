"""A-optimality observability scores over panoramic depth images.

Each usable pixel contributes a point-to-plane information row
[ (Rp x n)^T, n^T ] (rotation block first); a sector's information matrix
is the sum of row outer products and its score the trace of the damped
inverse, lower meaning better constrained. Prior rows are scaled by
sqrt(w_osm). The prior-coverage score is reported through the utility
transform P = s_max - min(trace, s_max) with s_max = 6/epsilon, so larger
means more prior support; the raw trace stays available via raw=True.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import CLASS_FACADE, CLASS_GROUND, CLASS_LOCAL
from .pano_depth import PanoDepthImage, pixel_centers, unproject_all

_UNIT_TOL = 1e-6
DEFAULT_EPSILON = 1e-3
SENTINEL = math.inf


def point_jacobian(p, n, rotation=None) -> np.ndarray:
    """Information row of one point-to-plane residual, rotation block first."""
    p = np.asarray(p, dtype=float).reshape(3)
    n = np.asarray(n, dtype=float).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > _UNIT_TOL:
        raise ValueError("normal must be unit length")
    x = p if rotation is None else np.asarray(rotation, dtype=float) @ p
    return np.concatenate([np.cross(x, n), n])


def accumulate_info(rows) -> np.ndarray:
    """Sum of row outer products as a 6x6 information matrix."""
    rows = np.asarray(rows, dtype=float).reshape(-1, 6)
    return rows.T @ rows


def a_opt_score(info, epsilon: float = 0.0) -> float:
    """trace((info + epsilon I)^-1); +inf when the damped matrix is singular."""
    info = np.asarray(info, dtype=float)
    if info.shape != (6, 6):
        raise ValueError("information matrix must be 6x6")
    if np.max(np.abs(info - info.T)) > 1e-6 * max(1.0, np.max(np.abs(info))):
        raise ValueError("information matrix must be symmetric")
    lam = np.linalg.eigvalsh(0.5 * (info + info.T)) + epsilon
    cutoff = 1e-12 * max(1.0, float(np.max(np.abs(lam)))) if lam.size else 0.0
    if float(np.min(lam)) <= cutoff:
        return SENTINEL
    return float(np.sum(1.0 / lam))


def _source_mask(classes: np.ndarray, source: str) -> np.ndarray:
    if source == "local":
        return classes == CLASS_LOCAL
    if source == "prior":
        return (classes == CLASS_FACADE) | (classes == CLASS_GROUND)
    raise ValueError("source must be 'local' or 'prior'")


def _sector_cols(img: PanoDepthImage, theta: float, half_fov: float) -> np.ndarray:
    alpha, _ = pixel_centers(img)
    diff = (alpha - theta + np.pi) % (2.0 * np.pi) - np.pi
    return np.abs(diff) <= half_fov


def _sector_info(img, cache, theta: float, sensor_fov: float, source: str) -> np.ndarray | None:
    pts, normals, valid = cache
    mask = valid & _source_mask(img.classes, source) & _sector_cols(
        img, theta, 0.5 * sensor_fov
    )[None, :]
    if not mask.any():
        return None
    p = pts[mask]
    n = normals[mask]
    rows = np.concatenate([np.cross(p, n), n], axis=1)
    rows = rows * np.sqrt(img.weights[mask])[:, None]
    return accumulate_info(rows)


def score_direction(
    img: PanoDepthImage,
    theta: float,
    sensor_fov: float,
    source: str = "local",
    epsilon: float = 0.0,
    raw: bool = False,
) -> float:
    """Score one candidate direction from the pixels its sector would see.

    source="local" returns the A-optimality score U (lower is better,
    +inf for an empty sector). source="prior" returns the coverage utility
    P (higher is better, 0 for an empty sector) unless raw=True, which
    returns the undamped-per-epsilon trace for either source.
    """
    cache = unproject_all(img)
    info = _sector_info(img, cache, theta, sensor_fov, source)
    if source == "local" or raw:
        if info is None:
            return SENTINEL
        return a_opt_score(info, epsilon)
    if epsilon <= 0.0:
        raise ValueError("prior utility requires epsilon > 0")
    s_max = 6.0 / epsilon
    if info is None:
        return 0.0
    return s_max - min(a_opt_score(info, epsilon), s_max)


@dataclass
class ScoreTable:
    """Scores on a regular motor-angle grid covering [0, 2*pi)."""

    delta_theta: float
    u: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.asarray(self.u, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if len(self.u) != len(self.p) or len(self.u) < 2:
            raise ValueError("need matching U/P arrays with at least 2 entries")
        if abs(len(self.u) * self.delta_theta - 2.0 * math.pi) > 1e-9:
            raise ValueError("delta_theta must divide 2*pi")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def thetas(self) -> np.ndarray:
        return np.arange(len(self.u)) * self.delta_theta

    def degenerate(self) -> bool:
        return bool(np.all(np.isinf(self.u)))

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("theta_deg,U,P\n")
            for theta, u, p in zip(self.thetas, self.u, self.p):
                f.write("%.6f,%.9g,%.9g\n" % (math.degrees(theta), u, p))


def build_score_table(
    img: PanoDepthImage,
    delta_theta: float = math.radians(10.0),
    sensor_fov: float = math.radians(70.0),
    epsilon: float = DEFAULT_EPSILON,
) -> ScoreTable:
    """Tabulate U and P on a regular grid of motor angles."""
    if delta_theta <= 0.0:
        raise ValueError("delta_theta must be positive")
    count = int(round(2.0 * math.pi / delta_theta))
    if count < 2 or abs(count * delta_theta - 2.0 * math.pi) > 1e-9:
        raise ValueError("delta_theta must divide 2*pi within 1e-9")
    if epsilon <= 0.0:
        raise ValueError("table scoring requires epsilon > 0")
    cache = unproject_all(img)
    s_max = 6.0 / epsilon
    u = np.empty(count)
    p = np.empty(count)
    for k in range(count):
        theta = k * delta_theta
        info_l = _sector_info(img, cache, theta, sensor_fov, "local")
        u[k] = SENTINEL if info_l is None else a_opt_score(info_l, epsilon)
        info_p = _sector_info(img, cache, theta, sensor_fov, "prior")
        p[k] = 0.0 if info_p is None else s_max - min(a_opt_score(info_p, epsilon), s_max)
    return ScoreTable(delta_theta, u, p)


def _interp_channel(values: np.ndarray, delta: float, theta: float) -> float:
    n = len(values)
    x = (theta % (2.0 * math.pi)) / delta
    k = int(math.floor(x))
    xi = x - k
    k %= n
    v0, v1 = values[k], values[(k + 1) % n]
    if math.isinf(v0) or math.isinf(v1):
        return SENTINEL
    return float((1.0 - xi) * v0 + xi * v1)


def interp_score(table: ScoreTable, theta: float) -> tuple[float, float]:
    """Linearly interpolated (U, P) at any angle, wrapping around the grid.

    A sentinel at either segment endpoint makes the whole segment sentinel.
    """
    return (
        _interp_channel(table.u, table.delta_theta, theta),
        _interp_channel(table.p, table.delta_theta, theta),
    )
