"""Triangle-soup scenes, a raycast range sensor, and builtin test worlds.

The sensor model fires a deterministic grid of rays over its field of view
at a single motor angle per frame (the frame rate is fast against the spin)
and perturbs ranges with seeded Gaussian noise. Builtin scenes are desk
scale: a notched corridor (the degenerate case), a campus block loop, and
a sparse open square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cloud import WeightedCloud
from .geometry import PoseSE3, motor_chain, rotation_about_z
from .osm_prior import (
    DemGrid,
    OsmFootprint,
    SOURCE_DEFAULT,
    SOURCE_EXPLICIT,
    SOURCE_LEVELS,
    _ring_area,
    footprints_to_osm,
)

_MIN_AREA = 1e-12
_T_MIN = 1e-9


@dataclass
class LidarModel:
    h_fov: float = math.radians(70.0)
    v_fov: float = math.radians(30.0)
    rays_per_frame: int = 2000
    max_range: float = 70.0
    range_sigma: float = 0.02
    frame_rate: float = 10.0

    def __post_init__(self) -> None:
        if not 0.0 < self.h_fov < 2.0 * math.pi:
            raise ValueError("h_fov must lie in (0, 2*pi)")
        if not 0.0 < self.v_fov < math.pi:
            raise ValueError("v_fov must lie in (0, pi)")
        if self.rays_per_frame < 4:
            raise ValueError("need at least 4 rays")
        if self.max_range <= 0.0 or self.range_sigma < 0.0 or self.frame_rate <= 0.0:
            raise ValueError("max_range/frame_rate must be positive, sigma non-negative")


@dataclass
class TrajectorySample:
    time: float
    pose: PoseSE3


class Scene:
    """Immutable triangle soup with per-facet precomputation for raycasts."""

    def __init__(self, triangles, footprints=None):
        tris = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
        self.triangles = tris
        self.footprints = list(footprints) if footprints else []
        self._v0 = tris[:, 0, :]
        self._e1 = tris[:, 1, :] - tris[:, 0, :]
        self._e2 = tris[:, 2, :] - tris[:, 0, :]
        cross = np.cross(self._e1, self._e2)
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        if np.any(areas <= _MIN_AREA):
            raise ValueError("degenerate facet (area <= 1e-12)")
        self.normals = cross / (2.0 * areas[:, None])
        self._e2_cross_e1 = np.cross(self._e2, self._e1)

    def __len__(self) -> int:
        return len(self.triangles)


def raycast_batch(scene: Scene, origin, directions, max_range: float):
    """Nearest Moller-Trumbore hit per ray from a shared origin.

    Returns (ranges, facet_indices, hit_mask); misses carry range +inf and
    index -1. Facets are double sided.
    """
    origin = np.asarray(origin, dtype=float).reshape(3)
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    s = origin - scene._v0  # (T, 3)
    q = np.cross(s, scene._e1)
    t_num = np.einsum("ij,ij->i", scene._e2, q)
    e2_cross_s = np.cross(scene._e2, s)

    a = d @ scene._e2_cross_e1.T  # (R, T)
    u_num = d @ e2_cross_s.T
    v_num = d @ q.T

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_a = np.where(np.abs(a) > 1e-12, 1.0 / a, np.nan)
        u = u_num * inv_a
        v = v_num * inv_a
        t = t_num[None, :] * inv_a
    valid = (
        np.isfinite(t)
        & (u >= -1e-12)
        & (v >= -1e-12)
        & (u + v <= 1.0 + 1e-12)
        & (t > _T_MIN)
        & (t <= max_range)
    )
    t = np.where(valid, t, np.inf)
    idx = np.argmin(t, axis=1)
    ranges = t[np.arange(len(d)), idx]
    hit = np.isfinite(ranges)
    idx = np.where(hit, idx, -1)
    return ranges, idx, hit


def raycast(scene: Scene, origin, direction, max_range: float):
    """Single-ray convenience wrapper; returns (range, normal) or None.

    The returned normal is the facet normal flipped to face the ray origin.
    """
    ranges, idx, hit = raycast_batch(scene, origin, np.asarray(direction)[None, :], max_range)
    if not hit[0]:
        return None
    n = scene.normals[idx[0]]
    if np.dot(n, np.asarray(direction, dtype=float)) > 0.0:
        n = -n
    return float(ranges[0]), n.copy()


def ray_grid(model: LidarModel) -> np.ndarray:
    """Deterministic az/el grid of unit directions in the sensor frame."""
    aspect = model.v_fov / model.h_fov
    n_el = max(2, int(round(math.sqrt(model.rays_per_frame * aspect))))
    n_az = max(2, model.rays_per_frame // n_el)
    az = np.linspace(-0.5 * model.h_fov, 0.5 * model.h_fov, n_az)
    el = np.linspace(-0.5 * model.v_fov, 0.5 * model.v_fov, n_el)
    az_g, el_g = np.meshgrid(az, el)
    az_g, el_g = az_g.ravel(), el_g.ravel()
    return np.stack(
        [np.cos(el_g) * np.cos(az_g), np.cos(el_g) * np.sin(az_g), np.sin(el_g)], axis=1
    )


def simulate_frame(
    scene: Scene,
    model: LidarModel,
    base: PoseSE3,
    theta: float,
    rng_seed,
    lidar_to_motor: PoseSE3 | None = None,
) -> WeightedCloud:
    """One frame of noisy returns, expressed in the sensor frame.

    Points carry the facet normal of their hit (sensor frame, oriented back
    toward the sensor); range noise is drawn from a generator seeded with
    rng_seed, so identical inputs give a bit-identical cloud.
    """
    if lidar_to_motor is None:
        lidar_to_motor = PoseSE3.identity()
    chain = motor_chain(theta, lidar_to_motor, base)
    d_l = ray_grid(model)
    d_w = d_l @ chain.rotation.T
    ranges, idx, hit = raycast_batch(scene, chain.translation, d_w, model.max_range)
    d_hit = d_l[hit]
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    noisy = ranges[hit] + rng.normal(0.0, model.range_sigma, int(hit.sum()))
    points = d_hit * noisy[:, None]
    n_w = scene.normals[idx[hit]]
    n_l = n_w @ chain.rotation
    flip = np.einsum("ij,ij->i", n_l, d_hit) > 0.0
    n_l[flip] = -n_l[flip]
    return WeightedCloud.build(points, normals=n_l)


def scene_to_osm(
    scene: Scene, dropout: float, seed: int = 0, origin: tuple[float, float] = (0.0, 0.0)
) -> bytes:
    """Serialize scene footprints to OSM XML with a seeded dropout fraction."""
    if not 0.0 <= dropout <= 1.0:
        raise ValueError("dropout must lie in [0, 1]")
    fps = scene.footprints
    n_drop = int(round(dropout * len(fps)))
    keep = list(range(len(fps)))
    if n_drop:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x05A1]))
        dropped = set(rng.choice(len(fps), size=n_drop, replace=False).tolist())
        keep = [i for i in keep if i not in dropped]
    return footprints_to_osm([fps[i] for i in keep], origin=origin)


def save_scene(path, scene: Scene) -> None:
    with open(path, "w") as f:
        for tri in scene.triangles:
            f.write(" ".join("%.9g" % v for v in tri.ravel()) + "\n")


def load_scene(path) -> Scene:
    tris = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 9:
                raise ValueError("facet line must have 9 floats: %r" % line)
            tris.append(np.array(vals).reshape(3, 3))
    return Scene(np.array(tris))


# --- builtin worlds ---------------------------------------------------------


def _rect_ring(cx, cy, w, d, yaw=0.0) -> np.ndarray:
    half = np.array([[-w, -d], [w, -d], [w, d], [-w, d], [-w, -d]]) * 0.5
    rot = rotation_about_z(yaw)[:2, :2]
    ring = half @ rot.T + np.array([cx, cy])
    if _ring_area(ring) < 0.0:
        ring = ring[::-1].copy()
    return ring


def _quad(p0, p1, p2, p3):
    return [np.array([p0, p1, p2]), np.array([p0, p2, p3])]


def _wall_quad(a, b, z0, z1):
    return _quad(
        [a[0], a[1], z0], [b[0], b[1], z0], [b[0], b[1], z1], [a[0], a[1], z1]
    )


def _extrude_ring(ring, z0, z1, roof=True):
    tris = []
    for a, b in zip(ring[:-1], ring[1:]):
        tris.extend(_wall_quad(a, b, z0, z1))
    if roof:
        anchor = ring[0]
        for a, b in zip(ring[1:-2], ring[2:-1]):
            tris.append(
                np.array(
                    [[anchor[0], anchor[1], z1], [a[0], a[1], z1], [b[0], b[1], z1]]
                )
            )
    return tris


def _ground_quad(x0, x1, y0, y1, z=0.0):
    return _quad([x0, y0, z], [x1, y0, z], [x1, y1, z], [x0, y1, z])


def _flat_dem(x0, x1, y0, y1, cell=5.0, z=0.0) -> DemGrid:
    n_cols = int(math.ceil((x1 - x0) / cell)) + 1
    n_rows = int(math.ceil((y1 - y0) / cell)) + 1
    return DemGrid(x0, y0, cell, np.full((n_rows, n_cols), z))


def _building(way_id, cx, cy, w, d, h, yaw=0.0, source=SOURCE_EXPLICIT):
    reliability = {SOURCE_EXPLICIT: 1.0, SOURCE_LEVELS: 0.8, SOURCE_DEFAULT: 0.5}[source]
    return OsmFootprint(way_id, _rect_ring(cx, cy, w, d, yaw), h, source, reliability)


def _straight_trajectory(x0, x1, y, z, speed, frame_rate):
    n = int(math.floor((x1 - x0) / speed * frame_rate)) + 1
    samples = []
    for k in range(n):
        t = k / frame_rate
        pose = PoseSE3(np.eye(3), np.array([x0 + speed * t, y, z]))
        samples.append(TrajectorySample(t, pose))
    return samples


_CURVATURE_RAMP = 2.0  # meters of curvature blend-in at each corner


def _loop_trajectory(x0, x1, y0, y1, radius, z, speed, frame_rate):
    """Counter-clockwise rounded-rectangle loop with heading along the path.

    Corners use a trapezoidal curvature profile (ramp, hold, ramp) so the
    yaw rate is continuous; a hard curvature step would be unkind to any
    constant-velocity motion model downstream.
    """
    lx = (x1 - radius) - (x0 + radius)
    ly = (y1 - radius) - (y0 + radius)
    ramp = _CURVATURE_RAMP
    # Each corner turns pi/2 total with peak curvature 1/radius:
    # integral of the trapezoid = (hold + ramp) / radius.
    hold = 0.5 * math.pi * radius - ramp
    if hold <= 0.0 or lx <= 2.0 * ramp or ly <= 2.0 * ramp:
        raise ValueError("loop too tight for the curvature ramps")
    corner = hold + 2.0 * ramp

    segs = []  # (length, kappa_start, kappa_end)
    for leg in (lx, ly, lx, ly):
        segs.append((leg - 2.0 * ramp, 0.0, 0.0))
        segs.append((ramp, 0.0, 1.0 / radius))
        segs.append((hold, 1.0 / radius, 1.0 / radius))
        segs.append((ramp, 1.0 / radius, 0.0))
    total = sum(s[0] for s in segs)
    assert abs(corner - (hold + 2.0 * ramp)) < 1e-12

    # Integrate heading and position over a fine arc-length grid
    # (trapezoid rule, exact for the piecewise-linear curvature up to
    # segment-boundary cells), then interpolate at the frame spacing.
    ds = 0.01
    bounds = np.cumsum([0.0] + [s[0] for s in segs])
    grid = np.append(np.arange(0.0, total, ds), total)
    kappa = np.zeros_like(grid)
    for (length, k0, k1), lo in zip(segs, bounds[:-1]):
        in_seg = (grid >= lo - 1e-12) & (grid < lo + length)
        frac = (grid[in_seg] - lo) / length
        kappa[in_seg] = k0 + (k1 - k0) * frac
    steps = np.diff(grid)
    heading = np.concatenate(
        [[0.0], np.cumsum(0.5 * (kappa[:-1] + kappa[1:]) * steps)]
    )
    cs, sn = np.cos(heading), np.sin(heading)
    xs = x0 + radius + np.concatenate(
        [[0.0], np.cumsum(0.5 * (cs[:-1] + cs[1:]) * steps)]
    )
    ys = y0 + np.concatenate([[0.0], np.cumsum(0.5 * (sn[:-1] + sn[1:]) * steps)])

    n = int(math.floor(total / speed * frame_rate)) + 1
    samples = []
    for k in range(n):
        t = k / frame_rate
        s = (speed * t) % total
        x = float(np.interp(s, grid, xs))
        y = float(np.interp(s, grid, ys))
        h = float(np.interp(s, grid, heading))
        pose = PoseSE3(rotation_about_z(h), np.array([x, y, z]))
        samples.append(TrajectorySample(t, pose))
    return samples


def _circle_trajectory(radius, z, speed, frame_rate, turns=1.0):
    total = 2.0 * math.pi * radius * turns
    n = int(math.floor(total / speed * frame_rate)) + 1
    samples = []
    for k in range(n):
        t = k / frame_rate
        phi = speed * t / radius
        xy = radius * np.array([math.cos(phi), math.sin(phi)])
        pose = PoseSE3(rotation_about_z(phi + 0.5 * math.pi), np.array([xy[0], xy[1], z]))
        samples.append(TrajectorySample(t, pose))
    return samples


@dataclass
class SceneBundle:
    scene: Scene
    dem: DemGrid
    trajectory: list


def _make_corridor(frame_rate: float) -> SceneBundle:
    # Two long parallel building slabs: between them, every wall normal is
    # lateral, so the along-axis direction is constrained only by the end
    # walls that close the channel. A forward-locked sensor cannot see
    # either end for the first stretch of the run; a turning one has the
    # near end behind it from the start. The end walls are interior
    # structure the OSM footprints do not describe, so the prior is
    # honest about the walls and silent about the only axial anchors.
    length, hw, height = 110.0, 2.5, 4.0
    slab = 4.0
    tris = []
    footprints = [
        _building(1, length / 2.0, hw + 0.5 * slab, length, slab, height),
        _building(2, length / 2.0, -hw - 0.5 * slab, length, slab, height),
    ]
    for fp in footprints:
        tris.extend(_extrude_ring(fp.ring, 0.0, height))
    tris.extend(_wall_quad((0.0, -hw), (0.0, hw), 0.0, height))
    tris.extend(_wall_quad((length, -hw), (length, hw), 0.0, height))
    tris.extend(_ground_quad(-1.0, length + 1.0, -hw - slab - 1.0, hw + slab + 1.0))
    scene = Scene(np.array(tris), footprints)
    dem = _flat_dem(-10.0, length + 10.0, -15.0, 15.0)
    traj = _straight_trajectory(4.0, length - 4.0, 0.0, 1.5, 1.5, frame_rate)
    return SceneBundle(scene, dem, traj)


_CAMPUS_BUILDINGS = [
    # inner block
    (1, 32.0, 30.0, 18.0, 12.0, 9.0, SOURCE_EXPLICIT),
    (2, 60.0, 32.0, 14.0, 14.0, 12.0, SOURCE_LEVELS),
    # south row (outside the loop)
    (3, 12.0, -12.0, 14.0, 10.0, 6.0, SOURCE_LEVELS),
    (4, 34.0, -12.0, 12.0, 10.0, 10.0, SOURCE_EXPLICIT),
    (5, 56.0, -13.0, 14.0, 10.0, 7.0, SOURCE_DEFAULT),
    (6, 78.0, -12.0, 12.0, 10.0, 12.0, SOURCE_EXPLICIT),
    # east row
    (7, 103.0, 12.0, 10.0, 14.0, 8.0, SOURCE_EXPLICIT),
    (8, 103.0, 34.0, 10.0, 12.0, 11.0, SOURCE_LEVELS),
    (9, 102.0, 52.0, 10.0, 12.0, 6.0, SOURCE_EXPLICIT),
    # west row
    (10, -13.0, 16.0, 10.0, 14.0, 10.0, SOURCE_EXPLICIT),
    (11, -12.0, 44.0, 10.0, 12.0, 7.0, SOURCE_LEVELS),
    # north side is an open plaza: no buildings
]


def _make_campus(frame_rate: float) -> SceneBundle:
    tris = []
    footprints = []
    for way_id, cx, cy, w, d, h, source in _CAMPUS_BUILDINGS:
        fp = _building(way_id, cx, cy, w, d, h, source=source)
        footprints.append(fp)
        tris.extend(_extrude_ring(fp.ring, 0.0, h))
    tris.extend(_ground_quad(-25.0, 115.0, -25.0, 80.0))
    scene = Scene(np.array(tris), footprints)
    dem = _flat_dem(-25.0, 115.0, -25.0, 80.0)
    traj = _loop_trajectory(0.0, 90.0, 0.0, 60.0, 6.0, 1.5, 2.0, frame_rate)
    return SceneBundle(scene, dem, traj)


def _make_open_square(frame_rate: float) -> SceneBundle:
    tris = []
    footprints = [
        _building(1, 0.0, 26.0, 20.0, 1.0, 5.0),
        _building(2, 27.0, -8.0, 1.0, 16.0, 4.0),
        _building(3, -22.0, -18.0, 14.0, 1.0, 6.0, yaw=math.radians(30.0)),
    ]
    for fp in footprints:
        tris.extend(_extrude_ring(fp.ring, 0.0, fp.height))
    tris.extend(_ground_quad(-40.0, 40.0, -40.0, 40.0))
    scene = Scene(np.array(tris), footprints)
    dem = _flat_dem(-40.0, 40.0, -40.0, 40.0)
    traj = _circle_trajectory(8.0, 1.5, 1.5, frame_rate)
    return SceneBundle(scene, dem, traj)


BUILTIN_SCENES = ("corridor", "campus", "open_square")


def make_scene(name: str, frame_rate: float = 10.0) -> SceneBundle:
    if name == "corridor":
        return _make_corridor(frame_rate)
    if name == "campus":
        return _make_campus(frame_rate)
    if name == "open_square":
        return _make_open_square(frame_rate)
    raise ValueError("unknown scene %r (builtin: %s)" % (name, ", ".join(BUILTIN_SCENES)))


def format_scene_files(
    name: str,
    out_dir,
    frame_rate: float = 10.0,
    dropout: float = 0.0,
    seed: int = 0,
) -> list:
    """Write a builtin scene as loadable files; returns the paths written."""
    import os

    from .evaluate import save_trajectory
    from .osm_prior import format_dem

    bundle = make_scene(name, frame_rate)
    paths = []

    p = os.path.join(out_dir, "scene.txt")
    save_scene(p, bundle.scene)
    paths.append(p)

    p = os.path.join(out_dir, "trajectory_gt.txt")
    save_trajectory(p, bundle.trajectory)
    paths.append(p)

    p = os.path.join(out_dir, "dem.asc")
    with open(p, "w") as f:
        f.write(format_dem(bundle.dem))
    paths.append(p)

    p = os.path.join(out_dir, "map.osm")
    with open(p, "wb") as f:
        f.write(scene_to_osm(bundle.scene, dropout=dropout, seed=seed))
    paths.append(p)

    return paths
