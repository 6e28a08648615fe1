"""Gating, robust aggregation, and bounded feedback behavior."""

import numpy as np
import pytest

from osmscan.cloud import WeightedCloud
from osmscan.fusion import (
    CorrectionState,
    FusionConfig,
    OsmAlignment,
    aggregate_window,
    align_to_prior,
    apply_feedback,
    build_prior_index,
    compute_residual,
    gate,
    huber_weight,
    push_alignment,
)
from osmscan.geometry import PoseSE3, TwistSE3, se3_exp, se3_log, so3_exp


def make_alignment(v, w, weight=1.0, cfg=None):
    return gate(TwistSE3(v, w), cfg or FusionConfig(), weight)


def test_residual_zero_for_equal_poses():
    pose = PoseSE3(so3_exp(np.array([0.1, 0.2, -0.3])), [4.0, 5.0, 6.0])
    xi = compute_residual(pose, pose)
    assert np.allclose(xi.as_vector(), np.zeros(6), atol=1e-12)


def test_residual_world_shift_lands_in_anchor_frame():
    rot = so3_exp(np.array([0.0, 0.0, 0.6]))
    d = np.array([0.3, -0.1, 0.2])
    t_osm = PoseSE3(rot, [1.0, 2.0, 3.0])
    t_lo = PoseSE3(rot, t_osm.translation + d)
    xi = compute_residual(t_lo, t_osm)
    assert np.allclose(xi.v, rot.T @ d, atol=1e-12)
    assert np.allclose(xi.w, np.zeros(3), atol=1e-12)


def test_residual_exp_recovers_relative_pose():
    rng = np.random.default_rng(11)
    for _ in range(50):
        t_lo = PoseSE3(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3))
        t_osm = PoseSE3(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3))
        xi = compute_residual(t_lo, t_osm)
        rel = t_osm.inverse().compose(t_lo)
        assert np.allclose(se3_exp(xi).matrix(), rel.matrix(), atol=1e-9)


def test_gate_zero_residual_accepted():
    a = make_alignment(np.zeros(3), np.zeros(3))
    assert a.e == 0.0 and a.accepted


def test_gate_worked_example_rejected():
    cfg = FusionConfig(sigma_t=0.1, sigma_r=0.05, lam=1.0, tau_gate=1.0)
    a = make_alignment([0.3, 0.0, 0.0], np.zeros(3), cfg=cfg)
    assert a.e_t == pytest.approx(3.0, abs=1e-9)
    assert a.e == pytest.approx(np.sqrt(9.0 / 2.0), abs=1e-9)
    assert not a.accepted


def test_gate_lambda_zero_ignores_rotation():
    cfg = FusionConfig(lam=1e-12)
    a = make_alignment([0.2, 0.0, 0.0], [0.0, 0.0, 0.4], cfg=cfg)
    assert a.e == pytest.approx(a.e_t, rel=1e-6)


def test_huber_weight_values():
    assert huber_weight(0.5) == 1.0
    assert huber_weight(1.0) == 1.0
    assert huber_weight(4.0) == 0.25


def test_accepted_weight_floor():
    # Anything through the gate keeps influence at least 1/tau_gate.
    cfg = FusionConfig()
    rng = np.random.default_rng(12)
    for _ in range(200):
        a = make_alignment(rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.05, cfg=cfg)
        if a.accepted:
            assert huber_weight(a.e) >= 1.0 / cfg.tau_gate - 1e-12


def test_aggregate_single_alignment_passthrough():
    cfg = FusionConfig(rho_t=0.5)
    a = make_alignment([0.2, 0.0, 0.0], np.zeros(3), cfg=cfg)
    s_t, s_r = aggregate_window([a], cfg)
    assert np.allclose(s_t, [0.2, 0.0, 0.0], atol=1e-12)
    assert np.allclose(s_r, np.zeros(3))


def test_aggregate_opposed_translations_skip_component():
    cfg = FusionConfig()
    a = make_alignment([0.2, 0.0, 0.0], [0.0, 0.0, 0.01], cfg=cfg)
    b = make_alignment([-0.2, 0.0, 0.0], [0.0, 0.0, 0.01], cfg=cfg)
    s_t, s_r = aggregate_window([a, b], cfg)
    assert np.allclose(s_t, np.zeros(3))
    assert s_r[2] == pytest.approx(0.01)


def test_aggregate_magnitude_saturates():
    cfg = FusionConfig(rho_t=0.2)
    a = make_alignment([0.5, 0.0, 0.0], np.zeros(3), cfg=cfg)
    s_t, _ = aggregate_window([a], cfg)
    assert np.linalg.norm(s_t) == pytest.approx(0.2, abs=1e-12)


def test_aggregate_empty_and_rejected_windows():
    cfg = FusionConfig(tau_gate=0.01)
    rejected = make_alignment([5.0, 0.0, 0.0], np.zeros(3), cfg=cfg)
    assert aggregate_window([], cfg) is None
    assert aggregate_window([rejected], cfg) is None


def test_aggregate_invariant_to_weight_scaling():
    cfg = FusionConfig()
    base = [
        make_alignment([0.1, 0.05, 0.0], [0.0, 0.0, 0.01], weight=0.5, cfg=cfg),
        make_alignment([0.2, -0.02, 0.0], [0.0, 0.0, 0.02], weight=1.0, cfg=cfg),
    ]
    scaled = [
        OsmAlignment(a.xi, a.e_t, a.e_r, a.e, a.accepted, a.weight * 3.7) for a in base
    ]
    s0 = aggregate_window(base, cfg)
    s1 = aggregate_window(scaled, cfg)
    assert np.allclose(s0[0], s1[0], atol=1e-12)
    assert np.allclose(s0[1], s1[1], atol=1e-12)


def test_window_fifo_and_rejection():
    cfg = FusionConfig(window=3)
    state = CorrectionState.create(cfg)
    for i in range(5):
        push_alignment(state, make_alignment([0.01 * i, 0.0, 0.0], np.zeros(3), cfg=cfg))
    push_alignment(
        state, make_alignment([9.9, 0.0, 0.0], np.zeros(3), cfg=FusionConfig(tau_gate=0.1))
    )
    assert len(state.window) == 3
    kept = [a.xi.v[0] for a in state.window]
    assert kept == pytest.approx([0.02, 0.03, 0.04])


def test_feedback_noop_off_period_and_when_empty():
    cfg = FusionConfig(period=10)
    state = CorrectionState.create(cfg)
    agg = (np.array([0.1, 0.0, 0.0]), np.zeros(3))
    same = apply_feedback(state, agg, cfg, frame_index=7)
    assert np.allclose(same.t_corr.matrix(), np.eye(4))
    same = apply_feedback(state, None, cfg, frame_index=10)
    assert np.allclose(same.t_corr.matrix(), np.eye(4))


def test_feedback_step_is_bounded():
    cfg = FusionConfig()
    rng = np.random.default_rng(13)
    state = CorrectionState.create(cfg)
    for k in range(50):
        v = rng.normal(size=3) * 2.0
        w = rng.normal(size=3) * 0.2
        s_t = min(np.linalg.norm(v), cfg.rho_t) * v / np.linalg.norm(v)
        s_r = min(np.linalg.norm(w), cfg.rho_r) * w / np.linalg.norm(w)
        new = apply_feedback(state, (s_t, s_r), cfg, frame_index=k * cfg.period)
        step = se3_log(new.t_corr.compose(state.t_corr.inverse()))
        assert np.linalg.norm(step.v) <= cfg.eta * cfg.rho_t + 1e-9
        assert np.linalg.norm(step.w) <= cfg.eta * cfg.rho_r + 1e-9
        state = new


def test_feedback_moves_corrected_pose_left():
    cfg = FusionConfig(eta=1.0)
    state = CorrectionState.create(cfg)
    state = apply_feedback(
        state, (np.array([0.1, 0.0, 0.0]), np.zeros(3)), cfg, frame_index=0
    )
    t_lo = PoseSE3(np.eye(3), [5.0, 0.0, 0.0])
    assert np.allclose(state.corrected(t_lo).translation, [5.1, 0.0, 0.0])


def two_wall_prior():
    # Two orthogonal facades with outward normals; enough structure to pin
    # down a planar offset.
    ys, zs = np.meshgrid(np.arange(-4.0, 4.01, 0.25), np.arange(0.0, 3.01, 0.25))
    wall_x = np.stack(
        [np.zeros(ys.size), ys.ravel(), zs.ravel()], axis=1
    )
    xs, zs2 = np.meshgrid(np.arange(-4.0, 4.01, 0.25), np.arange(0.0, 3.01, 0.25))
    wall_y = np.stack([xs.ravel(), np.zeros(xs.size), zs2.ravel()], axis=1)
    pts = np.vstack([wall_x, wall_y])
    normals = np.vstack(
        [
            np.tile([1.0, 0.0, 0.0], (len(wall_x), 1)),
            np.tile([0.0, 1.0, 0.0], (len(wall_y), 1)),
        ]
    )
    return WeightedCloud.build(pts, normals=normals)


def test_align_identity_on_prior_sample():
    prior = two_wall_prior()
    scan = WeightedCloud.build(prior.points[::3])
    delta = align_to_prior(scan, prior, PoseSE3.identity())
    assert delta is not None
    assert np.abs(delta.matrix() - np.eye(4)).max() < 1e-6


def test_align_empty_prior_gives_none():
    scan = WeightedCloud.build(np.random.default_rng(0).normal(size=(30, 3)))
    assert align_to_prior(scan, WeightedCloud.empty(), PoseSE3.identity()) is None


def test_align_recovers_known_offset():
    prior = two_wall_prior()
    offset = PoseSE3(np.eye(3), [0.2, -0.15, 0.0])
    scan = WeightedCloud.build(offset.inverse().apply(prior.points[::2]))
    delta = align_to_prior(scan, prior, PoseSE3.identity())
    assert delta is not None
    assert np.abs(delta.translation[:2] - [0.2, -0.15]).max() < 5e-3


def test_align_accepts_prebuilt_index():
    prior = two_wall_prior()
    index = build_prior_index(prior)
    scan = WeightedCloud.build(prior.points[::4])
    delta = align_to_prior(scan, prior, PoseSE3.identity(), index=index)
    assert delta is not None
    assert np.abs(delta.translation).max() < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(sigma_t=0.0)
    with pytest.raises(ValueError):
        FusionConfig(eta=0.0)
    with pytest.raises(ValueError):
        FusionConfig(window=0)
