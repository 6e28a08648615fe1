"""Horizon planning against an exact dynamic-programming grid oracle."""

import math

import numpy as np
import pytest

from osmscan.mpc import (
    ControllerState,
    MpcConfig,
    evaluate_objective,
    predicted_angles,
    shift_warm_start,
    solve,
    step_controller,
)
from osmscan.observability import ScoreTable, interp_score


def random_table(rng, n=36):
    delta = 2.0 * math.pi / n
    u = rng.uniform(1.0, 50.0, size=n)
    p = rng.uniform(0.0, 30.0, size=n)
    return ScoreTable(delta, u, p)


def grid_minimum(theta0, table, cfg, step=0.05):
    """Exact minimum over all speed sequences from the discretized box.

    Every speed is an integer multiple of `step`, so the cumulative angle
    is too; dynamic programming over that integer sum enumerates the whole
    grid without building it.
    """
    m_lo = round(cfg.omega_min / step)
    m_hi = round(cfg.omega_max / step)
    mults = np.arange(m_lo, m_hi + 1)
    speed_cost = cfg.beta * (mults * step - cfg.omega_ref) ** 2

    def stage(m):
        theta = theta0 + cfg.dt * step * m
        u, p = interp_score(table, float(theta))
        return cfg.alpha * u - cfg.gamma * p

    dp = np.full(1, 0.0)  # dp[m - i*m_lo] after i steps
    for i in range(1, cfg.horizon + 1):
        size = i * (m_hi - m_lo) + 1
        ndp = np.full(size, np.inf)
        for j, sc in zip(mults, speed_cost):
            lo = j - m_lo
            ndp[lo : lo + len(dp)] = np.minimum(ndp[lo : lo + len(dp)], dp + sc)
        m_values = np.arange(i * m_lo, i * m_hi + 1)
        ndp += np.array([stage(m) for m in m_values])
        dp = ndp
    return float(dp.min())


def test_predicted_angles_integrate_speeds():
    angles = predicted_angles(np.array([1.0, 2.0, 3.0]), 0.5, 0.1)
    assert np.allclose(angles, [0.6, 0.8, 1.1])


def test_solver_near_grid_minimum_on_random_tables():
    rng = np.random.default_rng(30)
    for trial in range(20):
        n_steps = int(rng.integers(1, 6))
        cfg = MpcConfig(horizon=n_steps, iterations=60)
        table = random_table(rng)
        theta0 = float(rng.uniform(0.0, 2.0 * math.pi))
        plan = solve(theta0, None, table, cfg)
        gmin = grid_minimum(theta0, table, cfg)
        assert plan.objective <= gmin + 0.05 * max(1.0, abs(gmin))


def test_plans_always_within_bounds():
    rng = np.random.default_rng(31)
    cfg = MpcConfig(horizon=8)
    for _ in range(20):
        plan = solve(float(rng.uniform(0, 6.28)), None, random_table(rng), cfg)
        assert np.all(plan.speeds >= cfg.omega_min - 1e-12)
        assert np.all(plan.speeds <= cfg.omega_max + 1e-12)


def test_solver_never_worse_than_warm_start():
    rng = np.random.default_rng(32)
    cfg = MpcConfig(horizon=6)
    for _ in range(20):
        table = random_table(rng)
        theta0 = float(rng.uniform(0.0, 2.0 * math.pi))
        warm = rng.uniform(cfg.omega_min, cfg.omega_max, size=cfg.horizon)
        plan = solve(theta0, warm, table, cfg)
        assert plan.objective <= evaluate_objective(warm, theta0, table, cfg) + 1e-9


def test_objective_matches_direct_rollout():
    rng = np.random.default_rng(33)
    cfg = MpcConfig(horizon=4)
    table = random_table(rng)
    speeds = rng.uniform(cfg.omega_min, cfg.omega_max, size=4)
    thetas = predicted_angles(speeds, 1.0, cfg.dt)
    expect = cfg.beta * np.sum((speeds - cfg.omega_ref) ** 2)
    for th in thetas:
        u, p = interp_score(table, float(th))
        expect += cfg.alpha * u - cfg.gamma * p
    assert evaluate_objective(speeds, 1.0, table, cfg) == pytest.approx(expect)


def test_sentinel_sector_avoided_when_alternative_exists():
    # One poisoned sector straight ahead; planning must route the horizon
    # around it rather than report an infinite objective.
    n = 36
    u = np.full(n, 10.0)
    u[0] = u[1] = math.inf
    table = ScoreTable(2.0 * math.pi / n, u, np.zeros(n))
    cfg = MpcConfig(horizon=5)
    plan = solve(0.0, None, table, cfg)
    assert math.isfinite(plan.objective)


def test_degenerate_table_falls_back_to_reference():
    n = 36
    table = ScoreTable(2.0 * math.pi / n, np.full(n, math.inf), np.zeros(n))
    cfg = MpcConfig(horizon=5)
    plan = solve(1.0, None, table, cfg)
    assert plan.degraded
    assert np.allclose(plan.speeds, cfg.omega_ref)


def test_warm_start_shift_duplicates_tail():
    cfg = MpcConfig(horizon=3)
    table = random_table(np.random.default_rng(34))
    plan = solve(0.0, None, table, cfg)
    shifted = shift_warm_start(plan)
    assert np.allclose(shifted[:-1], plan.speeds[1:])
    assert shifted[-1] == plan.speeds[-1]
    assert shift_warm_start(None) is None


def test_controller_applies_first_speed_and_advances():
    cfg = MpcConfig(horizon=4)
    table = random_table(np.random.default_rng(35))
    state = ControllerState(theta=0.3)
    omega, new_state = step_controller(state, table, cfg)
    assert omega == pytest.approx(float(new_state.plan.speeds[0]))
    assert new_state.theta == pytest.approx((0.3 + omega * cfg.dt) % (2 * math.pi))


def test_controller_wraps_angle():
    cfg = MpcConfig(horizon=2)
    table = random_table(np.random.default_rng(36))
    state = ControllerState(theta=2.0 * math.pi - 1e-3)
    _, new_state = step_controller(state, table, cfg)
    assert 0.0 <= new_state.theta < 2.0 * math.pi


def test_horizon_coverage_floor():
    cfg = MpcConfig(horizon=10)
    table = random_table(np.random.default_rng(37))
    plan = solve(0.0, None, table, cfg)
    swept = float(plan.angles[-1])
    assert swept >= cfg.horizon * cfg.dt * cfg.omega_min - 1e-9


def test_config_validation():
    with pytest.raises(ValueError):
        MpcConfig(horizon=0)
    with pytest.raises(ValueError):
        MpcConfig(omega_min=0.0)
    with pytest.raises(ValueError):
        MpcConfig(omega_min=5.0, omega_max=3.0)
