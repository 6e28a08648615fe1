"""Panoramic depth images over fused local + prior clouds.

Projection keeps the nearest return per pixel together with its class and
weight; unprojection reconstructs a point and a normal per pixel, the
normal coming from central differences of neighboring pixel ranges with a
radial fallback. Pixel mapping is the floor quantization

    u = floor((alpha - alpha_min) / (alpha_max - alpha_min) * (W - 1))

and the symmetric expression for v, with alpha = atan2(y, x) and
beta = asin(z / r) measured in the viewpoint frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import WeightedCloud
from .geometry import PoseSE3

DEFAULT_WIDTH = 360
DEFAULT_HEIGHT = 90
DEFAULT_BOUNDS = (-math.pi, math.pi, -math.pi / 6.0, math.pi / 6.0)
DEFAULT_MIN_RANGE = 0.05
DEFAULT_VOXEL = 0.3

NO_CLASS = 255


@dataclass
class PanoDepthImage:
    ranges: np.ndarray  # (H, W), +inf where empty
    classes: np.ndarray  # (H, W) uint8, 255 where empty
    weights: np.ndarray  # (H, W), 0 where empty
    bounds: tuple  # (alpha_min, alpha_max, beta_min, beta_max)

    def __post_init__(self) -> None:
        a0, a1, b0, b1 = self.bounds
        if not (-math.pi <= a0 < a1 <= math.pi):
            raise ValueError("need -pi <= alpha_min < alpha_max <= pi")
        if not (-0.5 * math.pi <= b0 < b1 <= 0.5 * math.pi):
            raise ValueError("need -pi/2 <= beta_min < beta_max <= pi/2")
        if self.ranges.shape != self.classes.shape or self.ranges.shape != self.weights.shape:
            raise ValueError("channel shapes disagree")

    @property
    def height(self) -> int:
        return self.ranges.shape[0]

    @property
    def width(self) -> int:
        return self.ranges.shape[1]

    def full_circle(self) -> bool:
        a0, a1, _, _ = self.bounds
        return (a1 - a0) >= 2.0 * math.pi - (a1 - a0) / max(1, self.width - 1)


def fuse_clouds(local: WeightedCloud, prior: WeightedCloud) -> WeightedCloud:
    """Concatenate live and prior points; classes keep them distinguishable."""
    return WeightedCloud.concat([local, prior])


def voxel_downsample(cloud: WeightedCloud, voxel: float = DEFAULT_VOXEL) -> WeightedCloud:
    """One representative per occupied voxel.

    The representative is the member nearest the voxel centroid (first by
    input order on ties) and keeps its own normal and class; the voxel
    weight is the maximum member weight.
    """
    if voxel <= 0.0:
        raise ValueError("voxel must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    n_groups = int(inverse.max()) + 1
    sums = np.zeros((n_groups, 3))
    counts = np.zeros(n_groups)
    np.add.at(sums, inverse, cloud.points)
    np.add.at(counts, inverse, 1.0)
    centroids = sums / counts[:, None]
    dist = np.linalg.norm(cloud.points - centroids[inverse], axis=1)
    order = np.lexsort((np.arange(len(cloud)), dist, inverse))
    first = np.ones(len(cloud), dtype=bool)
    first[1:] = inverse[order][1:] != inverse[order][:-1]
    rep = order[first]
    max_w = np.zeros(n_groups)
    np.maximum.at(max_w, inverse, cloud.weights)
    out = cloud.select(rep)
    out.weights = max_w[inverse[rep]]
    return out


def _angles(points: np.ndarray):
    r = np.linalg.norm(points, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.arctan2(points[:, 1], points[:, 0])
        beta = np.arcsin(np.clip(points[:, 2] / np.where(r > 0.0, r, 1.0), -1.0, 1.0))
    return r, alpha, beta


def project_pano(
    cloud: WeightedCloud,
    viewpoint: PoseSE3,
    width: int = DEFAULT_WIDTH,
    height: int = DEFAULT_HEIGHT,
    bounds: tuple = DEFAULT_BOUNDS,
    min_range: float = DEFAULT_MIN_RANGE,
) -> PanoDepthImage:
    """Project a cloud seen from viewpoint into a panoramic depth image."""
    a0, a1, b0, b1 = bounds
    local = viewpoint.inverse().apply(cloud.points)
    r, alpha, beta = _angles(local)
    keep = (
        (r >= min_range)
        & (alpha >= a0)
        & (alpha <= a1)
        & (beta >= b0)
        & (beta <= b1)
    )
    u = np.floor((alpha[keep] - a0) / (a1 - a0) * (width - 1)).astype(np.int64)
    v = np.floor((beta[keep] - b0) / (b1 - b0) * (height - 1)).astype(np.int64)
    u = np.clip(u, 0, width - 1)
    v = np.clip(v, 0, height - 1)
    pix = v * width + u
    rr = r[keep]
    idx = np.flatnonzero(keep)
    order = np.lexsort((idx, rr, pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    sel = order[first]

    ranges = np.full((height, width), np.inf)
    classes = np.full((height, width), NO_CLASS, dtype=np.uint8)
    weights = np.zeros((height, width))
    rows, cols = pix[sel] // width, pix[sel] % width
    ranges[rows, cols] = rr[sel]
    classes[rows, cols] = cloud.classes[idx[sel]]
    weights[rows, cols] = cloud.weights[idx[sel]]
    return PanoDepthImage(ranges, classes, weights, bounds)


def pixel_centers(img: PanoDepthImage):
    """Center angles (alpha per column, beta per row) of the quantization."""
    a0, a1, b0, b1 = img.bounds
    w1 = max(1, img.width - 1)
    h1 = max(1, img.height - 1)
    alpha = a0 + (np.arange(img.width) + 0.5) * (a1 - a0) / w1
    beta = b0 + (np.arange(img.height) + 0.5) * (b1 - b0) / h1
    return np.minimum(alpha, a1), np.minimum(beta, b1)


def unproject_all(img: PanoDepthImage):
    """Vectorized unprojection of every finite pixel.

    Returns (points, normals, valid) as (H, W, 3)/(H, W, 3)/(H, W) arrays in
    the viewpoint frame. Normals come from central differences of the
    neighboring pixel points (azimuth wraps on full-circle images) and fall
    back to the reversed view ray when a neighbor is missing.
    """
    alpha, beta = pixel_centers(img)
    ca, sa = np.cos(alpha)[None, :], np.sin(alpha)[None, :]
    cb, sb = np.cos(beta)[:, None], np.sin(beta)[:, None]
    dirs = np.stack(
        [np.broadcast_to(cb * ca, img.ranges.shape),
         np.broadcast_to(cb * sa, img.ranges.shape),
         np.broadcast_to(sb * np.ones_like(ca), img.ranges.shape)],
        axis=2,
    )
    valid = np.isfinite(img.ranges)
    pts = dirs * np.where(valid, img.ranges, np.nan)[:, :, None]

    wrap = img.full_circle()

    def shift_u(arr, step):
        if wrap:
            return np.roll(arr, -step, axis=1)
        out = np.full_like(arr, np.nan)
        if step > 0:
            out[:, :-step] = arr[:, step:]
        else:
            out[:, -step:] = arr[:, :step]
        return out

    def shift_v(arr, step):
        out = np.full_like(arr, np.nan)
        if step > 0:
            out[:-step, :] = arr[step:, :]
        else:
            out[-step:, :] = arr[:step, :]
        return out

    tan_u = shift_u(pts, 1) - shift_u(pts, -1)
    tan_v = shift_v(pts, 1) - shift_v(pts, -1)
    normals = np.cross(tan_u, tan_v)
    norm = np.linalg.norm(normals, axis=2)
    ok = valid & np.isfinite(norm) & (norm > 1e-12)
    with np.errstate(invalid="ignore"):
        normals = normals / np.where(ok, norm, 1.0)[:, :, None]
    # Radial fallback, and a consistent inward orientation elsewhere.
    normals[~ok] = -dirs[~ok]
    flip = np.einsum("hwc,hwc->hw", normals, dirs) > 0.0
    normals[flip] = -normals[flip]
    normals[~valid] = np.nan
    pts[~valid] = np.nan
    return pts, normals, valid


def unproject_pixel(img: PanoDepthImage, u: int, v: int):
    """Point and normal for one finite pixel (viewpoint frame)."""
    if not (0 <= u < img.width and 0 <= v < img.height):
        raise IndexError("pixel (%d, %d) outside image" % (u, v))
    if not np.isfinite(img.ranges[v, u]):
        raise ValueError("pixel (%d, %d) is empty" % (u, v))
    pts, normals, _ = unproject_all(img)
    return pts[v, u].copy(), normals[v, u].copy()


def write_pgm(img: PanoDepthImage, path) -> None:
    """Debug dump: inverse ranges as an 8-bit ASCII PGM."""
    inv = np.where(np.isfinite(img.ranges), 1.0 / np.maximum(img.ranges, 1e-6), 0.0)
    peak = inv.max()
    gray = np.zeros_like(inv, dtype=np.int64) if peak <= 0.0 else np.rint(
        inv / peak * 255.0
    ).astype(np.int64)
    with open(path, "w") as f:
        f.write("P2\n%d %d\n255\n" % (img.width, img.height))
        for row in gray:
            f.write(" ".join(str(int(v)) for v in row) + "\n")
