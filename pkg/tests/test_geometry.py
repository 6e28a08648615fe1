"""Rotation/twist algebra against dense matrix oracles."""

import numpy as np
import pytest

from osmscan.geometry import (
    BranchAmbiguityError,
    PoseSE3,
    TwistSE3,
    chain_to_world,
    check_rotation,
    motor_chain,
    rotation_about_z,
    se3_exp,
    se3_log,
    skew,
    so3_exp,
    so3_log,
    wrap_angle,
)


def random_pose(rng, max_angle=2.5):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = so3_exp(axis * rng.uniform(0.0, max_angle))
    return PoseSE3(rot, rng.uniform(-10.0, 10.0, size=3))


def test_skew_cross_product_table():
    assert np.allclose(skew((0, 0, 1)) @ (1, 0, 0), (0, 1, 0))
    assert np.allclose(skew((0, 0, 0)), np.zeros((3, 3)))


def test_skew_matches_cross_and_is_antisymmetric():
    rng = np.random.default_rng(7)
    for _ in range(100):
        u, x = rng.normal(size=3), rng.normal(size=3)
        K = skew(u)
        assert np.allclose(K @ x, np.cross(u, x), atol=1e-12)
        assert np.allclose(K.T, -K, atol=0.0)


def test_skew_is_linear():
    rng = np.random.default_rng(8)
    u, v = rng.normal(size=3), rng.normal(size=3)
    assert np.allclose(skew(2.5 * u - 0.3 * v), 2.5 * skew(u) - 0.3 * skew(v))


def test_so3_exp_log_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(500):
        w = rng.normal(size=3)
        w *= rng.uniform(0.0, 3.1) / np.linalg.norm(w)
        assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-9)


def test_so3_log_rejects_half_turn():
    with pytest.raises(BranchAmbiguityError):
        so3_log(so3_exp(np.array([np.pi, 0.0, 0.0])))


def test_se3_log_trivial_values():
    assert np.allclose(se3_log(PoseSE3.identity()).as_vector(), np.zeros(6))
    shifted = PoseSE3(np.eye(3), [1.0, -2.0, 0.5])
    xi = se3_log(shifted)
    assert np.allclose(xi.v, [1.0, -2.0, 0.5], atol=1e-12)
    assert np.allclose(xi.w, np.zeros(3), atol=1e-12)


def test_se3_exp_trivial_values():
    assert np.allclose(se3_exp(TwistSE3.zero()).matrix(), np.eye(4))
    quarter = se3_exp(TwistSE3(np.zeros(3), [0.0, 0.0, np.pi / 2]))
    assert np.allclose(quarter.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_se3_exp_log_round_trip_random():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        pose = random_pose(rng, max_angle=3.0)
        back = se3_exp(se3_log(pose))
        worst = max(worst, np.abs(back.matrix() - pose.matrix()).max())
    assert worst < 1e-9


def test_se3_exp_inverse_is_negated_twist():
    rng = np.random.default_rng(3)
    for _ in range(200):
        xi = TwistSE3(rng.normal(size=3), rng.normal(size=3) * 0.8)
        prod = se3_exp(xi).compose(se3_exp(TwistSE3(-xi.v, -xi.w)))
        assert np.allclose(prod.matrix(), np.eye(4), atol=1e-9)


def test_twist_vector_layout_round_trips():
    xi = TwistSE3([1, 2, 3], [4, 5, 6])
    assert np.allclose(xi.as_vector(), [1, 2, 3, 4, 5, 6])
    assert np.allclose(TwistSE3.from_vector(xi.as_vector()).w, [4, 5, 6])


def test_compose_and_inverse_match_matrix_algebra():
    rng = np.random.default_rng(4)
    for _ in range(100):
        a, b = random_pose(rng), random_pose(rng)
        assert np.allclose(a.compose(b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
        assert np.allclose(
            a.inverse().matrix(), np.linalg.inv(a.matrix()), atol=1e-10
        )


def test_check_rotation_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        check_rotation(np.eye(3) * 1.1)
    with pytest.raises(ValueError):
        check_rotation(np.diag([1.0, 1.0, -1.0]))


def test_check_rotation_snaps_small_drift():
    # A long compose chain leaves the manifold by a hair; the validator
    # projects it back instead of failing.
    rot = so3_exp(np.array([0.1, -0.2, 0.3]))
    dirty = rot + 1e-8 * np.ones((3, 3))
    clean = check_rotation(dirty)
    assert np.abs(clean.T @ clean - np.eye(3)).max() < 1e-12


def test_chain_identity_passthrough():
    p = np.array([1.0, 2.0, 3.0])
    out = chain_to_world(p, 0.0, PoseSE3.identity(), PoseSE3.identity())
    assert np.allclose(out, p)


def test_chain_half_turn_flips_x():
    out = chain_to_world(
        np.array([1.0, 0.0, 0.0]), np.pi, PoseSE3.identity(), PoseSE3.identity()
    )
    assert np.allclose(out, [-1.0, 0.0, 0.0], atol=1e-12)


def test_chain_matches_homogeneous_product():
    rng = np.random.default_rng(5)
    for _ in range(100):
        base, ext = random_pose(rng), random_pose(rng)
        theta = rng.uniform(-np.pi, np.pi)
        p = rng.normal(size=3)
        motor = np.eye(4)
        motor[:3, :3] = rotation_about_z(theta)
        chain = base.matrix() @ motor @ ext.matrix()
        expect = (chain @ np.append(p, 1.0))[:3]
        assert np.allclose(chain_to_world(p, theta, ext, base), expect, atol=1e-9)
        assert np.allclose(motor_chain(theta, ext, base).matrix(), chain, atol=1e-9)


def test_chain_preserves_pairwise_distances():
    rng = np.random.default_rng(6)
    pts = rng.normal(size=(20, 3))
    out = chain_to_world(pts, 0.7, random_pose(rng), random_pose(rng))
    d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None, :], axis=-1)
    assert np.abs(d_in - d_out).max() < 1e-9


def test_wrap_angle_canonical_range():
    assert wrap_angle(np.pi) == pytest.approx(-np.pi)
    assert wrap_angle(3 * np.pi / 2) == pytest.approx(-np.pi / 2)
    assert wrap_angle(-0.1) == pytest.approx(-0.1)
