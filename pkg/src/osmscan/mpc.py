"""Receding-horizon motor speed planning over a score table.

The stage cost trades scan informativeness (interpolated U, lower better),
speed regularization around a reference, and prior coverage (interpolated
P, higher better):

    J = alpha * sum U(theta_i) + beta * sum (omega_i - omega_ref)^2
        - gamma * sum P(theta_i),      theta_{i+1} = theta_i + omega_i dt.

Speeds live in a box [omega_min, omega_max]; the solver is projected
gradient with backtracking on the analytic gradient. The landscape is
piecewise linear in the cumulative angle and full of local minima, so the
descent starts include a dynamic-programming sweep over speeds quantized
to _SEED_RESOLUTION, which is globally optimal on that lattice; gradient
refinement then closes the quantization gap. The returned plan is never
worse than its warm start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_two_pi
from .observability import ScoreTable, interp_score

_IMPROVE_EPS = 1e-15
_SEED_RESOLUTION = 0.1


@dataclass
class MpcConfig:
    horizon: int = 10
    dt: float = 0.1
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 1.0
    omega_ref: float = 3.0
    omega_min: float = 0.5
    omega_max: float = 12.0
    iterations: int = 30

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if not 0.0 < self.omega_min < self.omega_max:
            raise ValueError("need 0 < omega_min < omega_max")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if min(self.alpha, self.beta, self.gamma) < 0.0:
            raise ValueError("weights must be non-negative")


@dataclass
class MotorPlan:
    speeds: np.ndarray
    angles: np.ndarray
    objective: float
    degraded: bool = False


def predicted_angles(speeds: np.ndarray, theta0: float, dt: float) -> np.ndarray:
    return theta0 + dt * np.cumsum(speeds)


def evaluate_objective(speeds, theta0: float, table: ScoreTable, cfg: MpcConfig) -> float:
    """Exact rollout cost; sentinel segments make it +inf."""
    speeds = np.asarray(speeds, dtype=float)
    thetas = predicted_angles(speeds, theta0, cfg.dt)
    total = cfg.beta * float(np.sum((speeds - cfg.omega_ref) ** 2))
    for theta in thetas:
        u, p = interp_score(table, theta)
        if math.isinf(u):
            return math.inf
        total += cfg.alpha * u - cfg.gamma * p
    return total


def _capped_values(values: np.ndarray) -> np.ndarray:
    """Replace sentinels with a finite cap that still ranks them worst."""
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return np.zeros_like(values)
    cap = 2.0 * float(finite.max()) + 1.0
    return np.where(np.isfinite(values), values, cap)


def _segment_slopes(values: np.ndarray, delta: float, thetas: np.ndarray) -> np.ndarray:
    n = len(values)
    x = (thetas % (2.0 * math.pi)) / delta
    k = np.floor(x).astype(int) % n
    return (values[(k + 1) % n] - values[k]) / delta


def _interp_vals(values: np.ndarray, delta: float, thetas) -> np.ndarray:
    n = len(values)
    x = (np.asarray(thetas, dtype=float) % (2.0 * math.pi)) / delta
    k = np.floor(x).astype(int)
    xi = x - k
    k %= n
    return (1.0 - xi) * values[k] + xi * values[(k + 1) % n]


def _objective_capped(speeds, theta0, u_cap, p, table, cfg) -> float:
    thetas = predicted_angles(speeds, theta0, cfg.dt)
    u_vals = _interp_vals(u_cap, table.delta_theta, thetas)
    p_vals = _interp_vals(p, table.delta_theta, thetas)
    return (
        cfg.beta * float(np.sum((np.asarray(speeds) - cfg.omega_ref) ** 2))
        + cfg.alpha * float(np.sum(u_vals))
        - cfg.gamma * float(np.sum(p_vals))
    )


def _dp_seed(theta0, u_cap, p_vals, table, cfg) -> np.ndarray | None:
    """Best plan over speeds quantized to _SEED_RESOLUTION.

    Each speed is an integer multiple of the resolution, so every partial
    angle sum is too; dynamic programming over that integer lattice finds
    the global lattice optimum without enumerating sequences.
    """
    res = _SEED_RESOLUTION
    m_lo = math.ceil(cfg.omega_min / res - 1e-9)
    m_hi = math.floor(cfg.omega_max / res + 1e-9)
    if m_hi <= m_lo:
        return None
    mults = np.arange(m_lo, m_hi + 1)
    speed_cost = cfg.beta * (mults * res - cfg.omega_ref) ** 2
    dp = np.zeros(1)
    parents = []
    for i in range(1, cfg.horizon + 1):
        size = i * (m_hi - m_lo) + 1
        ndp = np.full(size, np.inf)
        choice = np.zeros(size, dtype=np.int64)
        for idx in range(len(mults)):
            lo = idx  # state index shifts by (mult - m_lo)
            window = ndp[lo : lo + len(dp)]
            cand = dp + speed_cost[idx]
            better = cand < window
            window[better] = cand[better]
            choice[lo : lo + len(dp)][better] = idx
        m_values = np.arange(i * m_lo, i * m_hi + 1)
        thetas = theta0 + cfg.dt * res * m_values
        ndp += cfg.alpha * _interp_vals(u_cap, table.delta_theta, thetas)
        ndp -= cfg.gamma * _interp_vals(p_vals, table.delta_theta, thetas)
        parents.append(choice)
        dp = ndp
    state = int(np.argmin(dp))
    speeds = np.empty(cfg.horizon)
    for i in range(cfg.horizon, 0, -1):
        idx = int(parents[i - 1][state])
        speeds[i - 1] = (m_lo + idx) * res
        state -= idx
    return speeds


def _gradient(speeds, theta0, u_cap, p, table, cfg) -> np.ndarray:
    thetas = predicted_angles(speeds, theta0, cfg.dt)
    slope_u = _segment_slopes(u_cap, table.delta_theta, thetas)
    slope_p = _segment_slopes(p, table.delta_theta, thetas)
    contrib = cfg.alpha * slope_u - cfg.gamma * slope_p
    # omega_i moves every later predicted angle by dt.
    tail = np.cumsum(contrib[::-1])[::-1]
    return 2.0 * cfg.beta * (speeds - cfg.omega_ref) + cfg.dt * tail


def _descend(start, theta0, u_cap, p_vals, table, cfg) -> tuple[np.ndarray, float]:
    omega = np.clip(np.asarray(start, dtype=float), cfg.omega_min, cfg.omega_max)
    cost = _objective_capped(omega, theta0, u_cap, p_vals, table, cfg)
    step = 0.5
    for _ in range(cfg.iterations):
        grad = _gradient(omega, theta0, u_cap, p_vals, table, cfg)
        accepted = False
        for _ in range(10):
            cand = np.clip(omega - step * grad, cfg.omega_min, cfg.omega_max)
            cand_cost = _objective_capped(cand, theta0, u_cap, p_vals, table, cfg)
            if cand_cost < cost - _IMPROVE_EPS:
                omega, cost = cand, cand_cost
                step *= 1.5
                accepted = True
                break
            step *= 0.5
        if not accepted and step < 1e-12:
            break
    return omega, cost


def solve(
    theta0: float,
    warm_start,
    table: ScoreTable,
    cfg: MpcConfig,
) -> MotorPlan:
    """Plan horizon speeds from theta0, warm started when a plan is given.

    A fully degenerate table (every U entry sentinel) yields the reference
    plan flagged degraded. The returned plan is never worse than the warm
    start under the exact objective.
    """
    ref_plan = np.clip(
        np.full(cfg.horizon, cfg.omega_ref), cfg.omega_min, cfg.omega_max
    )
    if table.degenerate():
        speeds = ref_plan if warm_start is None else np.clip(
            np.asarray(warm_start, dtype=float), cfg.omega_min, cfg.omega_max
        )
        return MotorPlan(
            speeds,
            predicted_angles(speeds, theta0, cfg.dt),
            evaluate_objective(speeds, theta0, table, cfg),
            degraded=True,
        )

    u_cap = _capped_values(table.u)
    p_vals = np.where(np.isfinite(table.p), table.p, 0.0)
    starts = [ref_plan]
    if warm_start is not None:
        starts.insert(
            0, np.clip(np.asarray(warm_start, dtype=float), cfg.omega_min, cfg.omega_max)
        )
    starts.append(np.full(cfg.horizon, cfg.omega_min))
    starts.append(np.full(cfg.horizon, cfg.omega_max))
    starts.append(np.full(cfg.horizon, 0.5 * (cfg.omega_min + cfg.omega_max)))
    seed = _dp_seed(theta0, u_cap, p_vals, table, cfg)
    if seed is not None:
        starts.append(seed)

    best_omega, best_capped = None, math.inf
    for start in starts:
        omega, cost = _descend(start, theta0, u_cap, p_vals, table, cfg)
        if cost < best_capped:
            best_omega, best_capped = omega, cost

    best_true = evaluate_objective(best_omega, theta0, table, cfg)
    baseline = starts[0]
    baseline_true = evaluate_objective(baseline, theta0, table, cfg)
    if baseline_true < best_true:
        best_omega, best_true = baseline, baseline_true
    return MotorPlan(
        best_omega, predicted_angles(best_omega, theta0, cfg.dt), best_true, degraded=False
    )


@dataclass
class ControllerState:
    theta: float
    plan: MotorPlan | None = None
    warm_speeds: np.ndarray | None = None


def shift_warm_start(plan: MotorPlan | None) -> np.ndarray | None:
    """Previous plan advanced one step, last entry duplicated."""
    if plan is None:
        return None
    speeds = np.asarray(plan.speeds, dtype=float)
    return np.concatenate([speeds[1:], speeds[-1:]])


def step_controller(state: ControllerState, table: ScoreTable, cfg: MpcConfig):
    """Solve from the current angle, apply the first speed, keep the rest."""
    warm = shift_warm_start(state.plan)
    plan = solve(state.theta, warm, table, cfg)
    omega = float(plan.speeds[0])
    new_state = ControllerState(
        theta=wrap_two_pi(state.theta + omega * cfg.dt), plan=plan, warm_speeds=warm
    )
    return omega, new_state
