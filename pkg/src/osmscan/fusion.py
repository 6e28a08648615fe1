"""Anchoring odometry to the coarse prior map.

Every alignment produces a residual twist between the prior-aligned pose
and the odometry estimate; residuals are chi-style gated, Huber weighted,
and aggregated over a sliding window into direction-times-saturated-
magnitude steps, which feed a bounded multiplicative correction

    T_corr <- exp(eta * [s_t; s_r]) * T_corr

applied every `period` frames. The corrected pose reported downstream is
T_corr composed with the odometry pose; odometry-internal state is never
touched.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .cloud import WeightedCloud
from .geometry import PoseSE3, TwistSE3, se3_exp, se3_log
from .odometry import RegistrationParams, icp_point_to_plane


@dataclass
class FusionConfig:
    sigma_t: float = 0.5
    sigma_r: float = 0.05
    lam: float = 1.0
    tau_gate: float = 3.0
    window: int = 10
    rho_t: float = 0.3
    rho_r: float = 0.03
    eta: float = 0.3
    period: int = 10

    def __post_init__(self) -> None:
        if min(self.sigma_t, self.sigma_r) <= 0.0 or self.lam < 0.0:
            raise ValueError("sigmas must be positive, lambda non-negative")
        if self.tau_gate <= 0.0 or self.window < 1 or self.period < 1:
            raise ValueError("gate/window/period must be positive")
        if min(self.rho_t, self.rho_r) <= 0.0 or not 0.0 < self.eta <= 1.0:
            raise ValueError("need positive saturations and eta in (0, 1]")


@dataclass
class OsmAlignment:
    """One gated alignment residual, ready for window aggregation."""

    xi: TwistSE3
    e_t: float
    e_r: float
    e: float
    accepted: bool
    weight: float = 1.0


def align_to_prior(
    scan_world: WeightedCloud,
    prior: WeightedCloud,
    init: PoseSE3,
    params: RegistrationParams | None = None,
    index=None,
) -> PoseSE3 | None:
    """Point-to-plane ICP of a world-frame scan against the prior cloud.

    Prior reliabilities weight the residuals. Returns the rigid correction
    that moves the already-placed scan onto the prior, seeded at init
    (identity for a fresh alignment), or None when the alignment does not
    converge. `index` may carry a prebuilt (tree, points, normals,
    weights) tuple for repeated calls.
    """
    params = params or RegistrationParams()
    # Recovering accumulated drift is the point here, so the odometry
    # trust region does not apply; the residual gate bounds what is used.
    params = replace(params, max_update_t=None, max_update_r=None)
    if index is None:
        index = build_prior_index(prior)
    tree, tpts, tnrm, tw = index
    if tree is None or len(scan_world) == 0:
        return None
    result = icp_point_to_plane(scan_world.points, tree, tpts, tnrm, tw, init, params)
    return result.pose if result.converged else None


def build_prior_index(prior: WeightedCloud):
    has_n = prior.has_normal()
    pts = prior.points[has_n]
    if len(pts) == 0:
        return None, None, None, None
    return cKDTree(pts), pts, prior.normals[has_n], prior.weights[has_n]


def compute_residual(t_lo: PoseSE3, t_osm: PoseSE3) -> TwistSE3:
    """Log of the relative transform taking the anchor pose to the LO pose."""
    return se3_log(t_osm.inverse().compose(t_lo))


def gate(xi: TwistSE3, cfg: FusionConfig, weight: float = 1.0) -> OsmAlignment:
    """Normalized residual magnitude test; accepted iff e <= tau_gate."""
    e_t = float(np.linalg.norm(xi.v)) / cfg.sigma_t
    e_r = float(np.linalg.norm(xi.w)) / cfg.sigma_r
    e = np.sqrt((e_t**2 + cfg.lam * e_r**2) / (1.0 + cfg.lam))
    return OsmAlignment(xi, e_t, e_r, float(e), bool(e <= cfg.tau_gate), weight)


def huber_weight(e: float) -> float:
    """Unit-threshold Huber influence weight."""
    return 1.0 if e <= 1.0 else 1.0 / e


def aggregate_window(alignments, cfg: FusionConfig):
    """Saturated direction/magnitude aggregate over accepted alignments.

    Returns (s_t, s_r), or None for an empty window. A component whose
    weighted sum has no direction (norm < 1e-12, e.g. symmetric cancel)
    contributes a zero step while the other still aggregates.
    """
    accepted = [a for a in alignments if a.accepted]
    if not accepted:
        return None
    w = np.array([a.weight * huber_weight(a.e) for a in accepted])
    total = float(w.sum())
    if total <= 0.0:
        return None

    def component(vectors, rho):
        vs = np.array(vectors)
        weighted_sum = (w[:, None] * vs).sum(axis=0)
        norm = float(np.linalg.norm(weighted_sum))
        if norm < 1e-12:
            return np.zeros(3)
        magnitude = float((w * np.linalg.norm(vs, axis=1)).sum()) / total
        return min(magnitude, rho) * (weighted_sum / norm)

    s_t = component([a.xi.v for a in accepted], cfg.rho_t)
    s_r = component([a.xi.w for a in accepted], cfg.rho_r)
    return s_t, s_r


@dataclass
class CorrectionState:
    t_corr: PoseSE3 = field(default_factory=PoseSE3.identity)
    window: deque = field(default_factory=deque)

    @classmethod
    def create(cls, cfg: FusionConfig) -> "CorrectionState":
        return cls(PoseSE3.identity(), deque(maxlen=cfg.window))

    def corrected(self, t_lo: PoseSE3) -> PoseSE3:
        return self.t_corr.compose(t_lo)


def push_alignment(state: CorrectionState, alignment: OsmAlignment) -> None:
    """Accepted alignments enter the ring buffer; rejected ones never do."""
    if alignment.accepted:
        state.window.append(alignment)


def apply_feedback(
    state: CorrectionState,
    aggregate,
    cfg: FusionConfig,
    frame_index: int | None = None,
) -> CorrectionState:
    """Bounded correction step, applied only on period boundaries.

    With frame_index given, frames off the period are a no-op; the step
    twist norm is bounded by eta * rho per component by construction.
    """
    if frame_index is not None and frame_index % cfg.period != 0:
        return state
    if aggregate is None:
        return state
    s_t, s_r = aggregate
    xi_upd = TwistSE3(cfg.eta * np.asarray(s_t), cfg.eta * np.asarray(s_r))
    return replace(state, t_corr=se3_exp(xi_upd).compose(state.t_corr))
