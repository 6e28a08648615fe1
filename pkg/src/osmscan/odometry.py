"""Stand-in LiDAR odometry: point-to-plane ICP against a rolling local map.

Registration is Gauss-Newton on se(3) with Huber-weighted residuals and
distance-gated nearest-neighbor correspondences. Steps are solved with the
near-null part of the spectrum truncated, so underconstrained directions
(the corridor axis, a lone visible plane) hold still instead of sliding,
and each step is backtracked so the robust cost never increases. The local
map keeps one point per voxel inside a horizon radius with FIFO eviction
at capacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import WeightedCloud
from .geometry import BranchAmbiguityError, PoseSE3, TwistSE3, se3_exp, se3_log
from .observability import accumulate_info


@dataclass
class RegistrationParams:
    max_corr_dist: float = 1.0
    huber_delta: float = 0.1
    max_iters: int = 8
    tol: float = 1e-6
    min_correspondences: int = 10
    settle_tol: float = 1e-2
    # Trust region around the initial guess; None disables a cap. A weakly
    # constrained or aliased view may "converge" far from the seed, and the
    # caps keep one such frame from dragging the trajectory with it.
    max_update_t: float | None = 0.6
    max_update_r: float | None = 0.15

    def __post_init__(self) -> None:
        if self.max_corr_dist <= 0.0 or self.huber_delta <= 0.0:
            raise ValueError("gates must be positive")
        if self.max_iters < 1 or self.min_correspondences < 1:
            raise ValueError("iteration/correspondence minimums must be positive")
        for cap in (self.max_update_t, self.max_update_r):
            if cap is not None and cap <= 0.0:
                raise ValueError("trust-region caps must be positive")


@dataclass
class RegistrationResult:
    pose: PoseSE3
    converged: bool
    info: np.ndarray
    n_correspondences: int
    iteration_costs: list = field(default_factory=list)  # (before, after) per iteration


def _huber_weights(residuals: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(residuals)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def _huber_loss(residuals: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(residuals)
    return np.where(a <= delta, 0.5 * a**2, delta * (a - 0.5 * delta))


def _jacobian_rows(points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return np.concatenate([np.cross(points, normals), normals], axis=1)


_EIG_CUTOFF = 1e-6
# A direction constrained only by normal-estimation noise accumulates an
# eigenvalue of roughly match count times squared normal error, which stays
# an order of magnitude under this floor; the weakest genuinely observed
# mode in a thin but usable view sits above it.
_EIG_FLOOR = 10.0


def _truncated_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Zero the step along near-null eigendirections instead of damping:
    # an unconstrained component (corridor axis, single visible plane)
    # must stay put rather than slide to wherever noise points.
    lam, vec = np.linalg.eigh(A)
    good = lam > max(_EIG_FLOOR, _EIG_CUTOFF * max(float(lam[-1]), 0.0))
    if not np.any(good):
        return np.zeros(6)
    coef = vec.T @ b
    coef = np.where(good, coef / np.where(good, lam, 1.0), 0.0)
    return vec @ coef


def icp_point_to_plane(
    points: np.ndarray,
    tree: cKDTree,
    target_points: np.ndarray,
    target_normals: np.ndarray,
    target_weights: np.ndarray,
    init: PoseSE3,
    params: RegistrationParams,
) -> RegistrationResult:
    """Shared ICP core for local-map registration and prior alignment."""
    pose = init
    costs = []
    settled = False
    for _ in range(params.max_iters):
        moved = pose.apply(points)
        dist, idx = tree.query(moved)
        mask = dist <= params.max_corr_dist
        if int(mask.sum()) < params.min_correspondences:
            return RegistrationResult(init, False, np.zeros((6, 6)), int(mask.sum()), costs)
        p_b = points[mask]
        n = target_normals[idx[mask]]
        q = target_points[idx[mask]]
        tw = target_weights[idx[mask]]
        r = np.einsum("ij,ij->i", n, moved[mask] - q)
        w = tw * _huber_weights(r, params.huber_delta)
        # Body-frame update (pose * Exp(delta)): rotation lever arms are
        # scan ranges, so conditioning is independent of where the body
        # sits in the world.
        n_b = n @ pose.rotation
        rows = _jacobian_rows(p_b, n_b)
        wr = rows * w[:, None]
        A = wr.T @ rows
        b = wr.T @ r
        delta = _truncated_solve(A, -b)

        cost_before = float(np.sum(tw * _huber_loss(r, params.huber_delta)))
        step = 1.0
        accepted = False
        for _ in range(6):
            xi = TwistSE3(step * delta[3:], step * delta[:3])
            cand = pose.compose(se3_exp(xi))
            r_new = np.einsum("ij,ij->i", n, cand.apply(p_b) - q)
            cost_after = float(np.sum(tw * _huber_loss(r_new, params.huber_delta)))
            if cost_after <= cost_before + 1e-15:
                pose = cand
                costs.append((cost_before, cost_after))
                accepted = True
                break
            step *= 0.5
        if not accepted:
            costs.append((cost_before, cost_before))
            settled = True
            break
        step_norm = float(np.linalg.norm(step * delta))
        if step_norm < params.tol:
            settled = True
            break
        if step_norm < params.settle_tol:
            settled = True

    pose, settled = _clamp_update(init, pose, settled, params)

    moved = pose.apply(points)
    dist, idx = tree.query(moved)
    mask = dist <= params.max_corr_dist
    n_corr = int(mask.sum())
    if n_corr < params.min_correspondences:
        return RegistrationResult(init, False, np.zeros((6, 6)), n_corr, costs)
    info = accumulate_info(
        _jacobian_rows(points[mask], target_normals[idx[mask]] @ pose.rotation)
    )
    return RegistrationResult(pose, settled, info, n_corr, costs)


def _clamp_update(init: PoseSE3, pose: PoseSE3, settled: bool, params: RegistrationParams):
    """Pull the solution back toward init when it left the trust region."""
    if params.max_update_t is None and params.max_update_r is None:
        return pose, settled
    try:
        rel = se3_log(init.inverse().compose(pose))
    except BranchAmbiguityError:
        return init, False
    scale = 1.0
    if params.max_update_t is not None:
        nv = float(np.linalg.norm(rel.v))
        if nv > params.max_update_t:
            scale = min(scale, params.max_update_t / nv)
    if params.max_update_r is not None:
        nw = float(np.linalg.norm(rel.w))
        if nw > params.max_update_r:
            scale = min(scale, params.max_update_r / nw)
    if scale >= 1.0:
        return pose, settled
    clamped = init.compose(se3_exp(TwistSE3(rel.v * scale, rel.w * scale)))
    return clamped, False


def estimate_normals(
    cloud: WeightedCloud, k_neighbors: int = 12, viewpoint=(0.0, 0.0, 0.0)
) -> WeightedCloud:
    """Covariance normals oriented toward the viewpoint.

    The normal is the smallest-eigenvalue direction of the k-neighborhood
    covariance; neighborhoods without a clear plane (middle eigenvalue
    vanishing, e.g. collinear points) are flagged normal-less.
    """
    if k_neighbors > len(cloud):
        raise ValueError("k_neighbors exceeds cloud size")
    if k_neighbors < 3:
        raise ValueError("need at least 3 neighbors")
    pts = cloud.points
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k_neighbors)
    neigh = pts[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_neighbors
    eigval, eigvec = np.linalg.eigh(cov)
    normals = eigvec[:, :, 0]
    degenerate = eigval[:, 1] <= 1e-6 * np.maximum(eigval[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=float) - pts
    flip = np.einsum("ij,ij->i", normals, to_view) < 0.0
    normals[flip] = -normals[flip]
    normals[degenerate] = np.nan
    return WeightedCloud(pts, normals, cloud.weights, cloud.classes)


_KEY_OFFSET = 1 << 20
_KEY_SHIFT = 21


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    ijk = np.floor(points / voxel).astype(np.int64) + _KEY_OFFSET
    return (ijk[:, 0] << (2 * _KEY_SHIFT)) | (ijk[:, 1] << _KEY_SHIFT) | ijk[:, 2]


@dataclass
class LocalMapConfig:
    voxel: float = 0.3
    horizon: float = 80.0
    capacity: int = 200_000
    rebuild_growth: float = 0.02


class LocalMap:
    """Voxel-deduplicated rolling map with a lazily rebuilt KD-tree."""

    def __init__(self, config: LocalMapConfig | None = None):
        self.config = config or LocalMapConfig()
        self.points = np.empty((0, 3))
        self.normals = np.empty((0, 3))
        self._keys = np.empty(0, dtype=np.int64)
        self._ids = np.empty(0, dtype=np.int64)
        self._next_id = 0
        self._tree = None
        self._tree_points = None
        self._tree_normals = None
        self._tree_size = 0

    def __len__(self) -> int:
        return len(self.points)

    def insert(self, cloud_world: WeightedCloud, pose: PoseSE3) -> int:
        """Add new voxels, then evict by horizon and FIFO capacity.

        Returns the number of points actually added; re-inserting the same
        scan at the same pose is a no-op.
        """
        cfg = self.config
        added = 0
        if len(cloud_world):
            keys = _voxel_keys(cloud_world.points, cfg.voxel)
            _, first = np.unique(keys, return_index=True)
            first = np.sort(first)
            keys = keys[first]
            fresh = ~np.isin(keys, self._keys, assume_unique=False)
            sel = first[fresh]
            added = len(sel)
            if added:
                self.points = np.concatenate([self.points, cloud_world.points[sel]])
                self.normals = np.concatenate([self.normals, cloud_world.normals[sel]])
                self._keys = np.concatenate([self._keys, keys[fresh]])
                ids = np.arange(self._next_id, self._next_id + added, dtype=np.int64)
                self._ids = np.concatenate([self._ids, ids])
                self._next_id += added

        evicted = False
        dist = np.linalg.norm(self.points - pose.translation, axis=1)
        keep = dist <= cfg.horizon
        if not keep.all():
            self._apply_mask(keep)
            evicted = True
        if len(self.points) > cfg.capacity:
            order = np.argsort(self._ids)
            keep_idx = np.sort(order[len(self.points) - cfg.capacity :])
            mask = np.zeros(len(self.points), dtype=bool)
            mask[keep_idx] = True
            self._apply_mask(mask)
            evicted = True
        if evicted:
            self._tree = None
        return added

    def _apply_mask(self, mask: np.ndarray) -> None:
        self.points = self.points[mask]
        self.normals = self.normals[mask]
        self._keys = self._keys[mask]
        self._ids = self._ids[mask]

    def matchable(self) -> int:
        return int(np.sum(~np.isnan(self.normals[:, 0])))

    def target(self):
        """(tree, points, normals) snapshot, rebuilt only on growth/eviction."""
        n = len(self.points)
        if self._tree is not None and self._tree_size > 0:
            growth = (n - self._tree_size) / self._tree_size
            if growth <= self.config.rebuild_growth:
                return self._tree, self._tree_points, self._tree_normals
        has_n = ~np.isnan(self.normals[:, 0])
        pts = self.points[has_n].copy()
        if len(pts) == 0:
            return None, None, None
        self._tree = cKDTree(pts)
        self._tree_points = pts
        self._tree_normals = self.normals[has_n].copy()
        self._tree_size = n
        return self._tree, self._tree_points, self._tree_normals


def update_local_map(local_map: LocalMap, scan_world: WeightedCloud, pose: PoseSE3) -> int:
    return local_map.insert(scan_world, pose)


def register_scan(
    scan: WeightedCloud,
    local_map: LocalMap,
    init: PoseSE3,
    params: RegistrationParams | None = None,
) -> RegistrationResult:
    """Align a sensor-frame scan to the local map starting from init.

    Falls back to the initial pose (diverged) when fewer than the minimum
    correspondences survive the distance gate. The returned info matrix is
    the unweighted row-outer-product sum over the final correspondences.
    """
    params = params or RegistrationParams()
    tree, tpts, tnrm = local_map.target()
    if tree is None or len(tpts) < params.min_correspondences:
        return RegistrationResult(init, False, np.zeros((6, 6)), 0, [])
    weights = np.ones(len(tpts))
    return icp_point_to_plane(scan.points, tree, tpts, tnrm, weights, init, params)


@dataclass
class OdometryConfig:
    map: LocalMapConfig = field(default_factory=LocalMapConfig)
    registration: RegistrationParams = field(default_factory=RegistrationParams)
    scan_voxel: float = 0.4


class ScanOdometry:
    """Frame-to-map odometry with a constant-velocity initial guess."""

    # Per-frame slew limits on the seed velocity (twist change per frame
    # squared). The platform cannot jerk the way a correcting registration
    # can, so estimation transients must not become the velocity that a
    # view-starved stretch then integrates.
    MAX_ACCEL_T = 0.02
    MAX_ACCEL_R = 0.02

    def __init__(self, config: OdometryConfig, initial_pose: PoseSE3):
        self.config = config
        self.map = LocalMap(config.map)
        self.initial_pose = initial_pose
        self.poses: list[PoseSE3] = []
        self.last_result: RegistrationResult | None = None
        self.last_match_points: np.ndarray | None = None  # frame of the input scan
        self._seed_vel: np.ndarray | None = None  # per-frame twist [v, w]

    def _initial_guess(self) -> PoseSE3:
        if self._seed_vel is None:
            return self.poses[-1]
        vel = self._seed_vel
        return self.poses[-1].compose(se3_exp(TwistSE3(vel[:3], vel[3:])))

    def _track_velocity(self) -> None:
        if len(self.poses) < 2:
            return
        try:
            raw = se3_log(self.poses[-2].inverse().compose(self.poses[-1])).as_vector()
        except BranchAmbiguityError:
            return
        if self._seed_vel is None:
            self._seed_vel = raw
            return
        d = raw - self._seed_vel
        for sl, cap in (((0, 3), self.MAX_ACCEL_T), ((3, 6), self.MAX_ACCEL_R)):
            part = d[sl[0] : sl[1]]
            norm = float(np.linalg.norm(part))
            if norm > cap:
                part *= cap / norm
        self._seed_vel = self._seed_vel + d

    def process_frame(self, scan: WeightedCloud, match_points: np.ndarray | None = None) -> PoseSE3:
        """Register a sensor-frame scan, then fold it into the map.

        match_points optionally supplies the downsampled point set used for
        matching (the full scan still feeds the map). Frames whose
        registration does not converge keep their pose estimate but are not
        inserted, so a transient bad fit cannot write ghost structure into
        the map it will be matched against later.
        """
        from .pano_depth import voxel_downsample  # local import, avoids a cycle

        if match_points is None:
            match_points = voxel_downsample(scan, self.config.scan_voxel).points
        self.last_match_points = match_points
        if not self.poses:
            pose = self.initial_pose
            self.last_result = RegistrationResult(pose, True, np.zeros((6, 6)), 0, [])
        else:
            init = self._initial_guess()
            result = register_scan(
                WeightedCloud.build(match_points), self.map, init, self.config.registration
            )
            pose = result.pose
            self.last_result = result
        if self.last_result.converged:
            self.map.insert(scan.transformed(pose), pose)
        self.poses.append(pose)
        self._track_velocity()
        return pose
