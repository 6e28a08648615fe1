"""SE(3)/so(3) primitives shared by every stage.

Conventions used throughout the package: rotation matrices are 3x3 arrays
acting on column vectors, twists store the translational part first as
(v, w), and the scan motor spins about the base z-axis with a right-handed
positive angle. The sensor chain is

    p_W = R_WB (R_BM(theta) (R_ML p_L + r_ML)) + r_WB

with R_BM(theta) a pure z-rotation in the base frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

_ORTHO_TOL = 1e-9
_SNAP_TOL = 1e-6
_PI_MARGIN = 1e-6
_SMALL_ANGLE = 1e-5


class BranchAmbiguityError(ValueError):
    """Rotation angle inside the ambiguous band around pi."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return float((theta + np.pi) % TWO_PI - np.pi)


def wrap_two_pi(theta: float) -> float:
    """Wrap an angle to [0, 2*pi)."""
    return float(theta % TWO_PI)


def skew(u) -> np.ndarray:
    """Skew-symmetric operator: skew(u) @ x == cross(u, x)."""
    u = np.asarray(u, dtype=float)
    return np.array(
        [
            [0.0, -u[2], u[1]],
            [u[2], 0.0, -u[0]],
            [-u[1], u[0], 0.0],
        ]
    )


def check_rotation(rot: np.ndarray, tol: float = _ORTHO_TOL) -> np.ndarray:
    rot = np.asarray(rot, dtype=float)
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        raise ValueError("rotation must be a finite 3x3 matrix")
    err = float(np.abs(rot.T @ rot - np.eye(3)).max())
    if err > _SNAP_TOL:
        raise ValueError("rotation matrix is not orthonormal")
    if np.linalg.det(rot) < 0.0:
        raise ValueError("rotation matrix has negative determinant")
    if err > tol:
        # Long compose chains drift off the manifold; project back.
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
    return rot


def rotation_about_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula; exact for any finite rotation vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        # Series for sin(t)/t and (1-cos(t))/t^2.
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Principal-branch rotation vector of a rotation matrix.

    Raises BranchAmbiguityError when the rotation angle is within 1e-6 of
    pi, where the principal branch is numerically ill-defined.
    """
    rot = check_rotation(rot)
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta >= np.pi - _PI_MARGIN:
        raise BranchAmbiguityError("rotation angle within 1e-6 of pi")
    a = np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if theta < _SMALL_ANGLE:
        # a == 2*sin(theta)*axis; 1/(2*sinc) expanded to second order.
        return a * (0.5 + theta**2 / 12.0)
    if theta > np.pi - 1e-3:
        # Near pi the antisymmetric part loses precision; recover the axis
        # from the symmetric part and use a only for the signs.
        sym = 0.5 * (rot + rot.T)
        u_sq = np.clip((np.diag(sym) - cos_theta) / (1.0 - cos_theta), 0.0, None)
        u = np.sqrt(u_sq)
        i = int(np.argmax(u))
        for j in range(3):
            if j != i and sym[i, j] < 0.0:
                u[j] = -u[j]
        if np.dot(u, a) < 0.0:
            u = -u
        return theta * u / np.linalg.norm(u)
    return a * (theta / (2.0 * np.sin(theta)))


def _left_jacobian(w: np.ndarray) -> np.ndarray:
    """V(w) with exp([w]x, v) translation = V(w) @ v."""
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * K + c * (K @ K)


def _left_jacobian_inv(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        c = 1.0 / 12.0 + theta**2 / 720.0
    else:
        c = (1.0 - 0.5 * theta * np.sin(theta) / (1.0 - np.cos(theta))) / theta**2
    return np.eye(3) - 0.5 * K + c * (K @ K)


@dataclass
class TwistSE3:
    """se(3) element, translational part first: (v, w)."""

    v: np.ndarray
    w: np.ndarray

    def __post_init__(self) -> None:
        self.v = np.asarray(self.v, dtype=float).reshape(3)
        self.w = np.asarray(self.w, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.w))):
            raise ValueError("twist components must be finite")

    @classmethod
    def zero(cls) -> "TwistSE3":
        return cls(np.zeros(3), np.zeros(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    @classmethod
    def from_vector(cls, xi) -> "TwistSE3":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])


@dataclass
class PoseSE3:
    """Rigid transform with validated rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        self.rotation = check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be finite")

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def se3_exp(xi: TwistSE3) -> PoseSE3:
    rot = so3_exp(xi.w)
    return PoseSE3(rot, _left_jacobian(xi.w) @ xi.v)


def se3_log(pose: PoseSE3) -> TwistSE3:
    w = so3_log(pose.rotation)
    return TwistSE3(_left_jacobian_inv(w) @ pose.translation, w)


def motor_chain(theta: float, lidar_to_motor: PoseSE3, base: PoseSE3) -> PoseSE3:
    """Full sensor-to-world transform for a given motor angle."""
    motor = PoseSE3(rotation_about_z(theta), np.zeros(3))
    return base.compose(motor.compose(lidar_to_motor))


def chain_to_world(p_l, theta: float, lidar_to_motor: PoseSE3, base: PoseSE3) -> np.ndarray:
    """Map sensor-frame point(s) through motor angle theta into the world."""
    return motor_chain(theta, lidar_to_motor, base).apply(p_l)
