"""SE(2) / SE(3) pose arithmetic for the bird's-eye-view world.

Frame conventions (usual camera axes): x right, y down, z forward. The
ground normal in the camera frame is n = (0, -1, 0) and the BEV plane is XZ.

A planar pose ``Pose2(x, z, theta)`` uses the 2x2 rotation
``[[cos, -sin], [sin, cos]]`` acting on (x, z) coordinates, i.e. a positive
theta rotates +x toward +z. In 3D that is a rotation by theta about the ground
normal (equivalently by -theta about +y). At theta = 0 the pose faces +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

SMALL_ANGLE = 1e-6
HEADING_EPS = 1e-9


class DegenerateHeadingError(ValueError):
    """Forward axis is (nearly) vertical, so the BEV heading is undefined."""


def wrap_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.pi - math.fmod(math.pi - theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    elif wrapped > math.pi:
        wrapped -= 2.0 * math.pi
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle`."""
    theta = np.asarray(theta, dtype=float)
    wrapped = math.pi - np.mod(math.pi - theta, 2.0 * math.pi)
    wrapped = np.where(wrapped <= -math.pi, wrapped + 2.0 * math.pi, wrapped)
    return np.where((theta > -math.pi) & (theta <= math.pi), theta, wrapped)


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    """Planar pose on the ground plane; theta is kept wrapped to (-pi, pi]."""

    x: float = 0.0
    z: float = 0.0
    theta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "z", float(self.z))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose2":
        return cls(m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.x, self.z])

    @property
    def rotation(self) -> np.ndarray:
        return rot2(self.theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix over (x, z, 1)."""
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = (self.x, self.z)
        return m

    def transform_point(self, p: Sequence[float]) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


def _check_rotation(r: np.ndarray, tol: float = 1e-9) -> None:
    if r.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {r.shape}")
    if not np.allclose(r.T @ r, np.eye(3), atol=tol) or abs(np.linalg.det(r) - 1.0) > tol:
        raise ValueError("rotation is not orthonormal with determinant +1")


@dataclass(frozen=True, eq=False)
class Pose3:
    """Rigid transform (R, t); R is validated as a proper rotation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        _check_rotation(r)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_pose2(cls, p: Pose2, y: float = 0.0) -> "Pose3":
        """Lift a planar pose: yaw about the ground normal, height ``y``."""
        return cls(yaw_rotation(p.theta), np.array([p.x, y, p.z]))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def transform_point(self, p: Sequence[float]) -> np.ndarray:
        return self.rotation @ np.asarray(p, dtype=float) + self.translation

    def __matmul__(self, other: "Pose3") -> "Pose3":
        return compose(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Pose3):
            return NotImplemented
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )

    def __repr__(self) -> str:
        return f"Pose3(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


Pose = Union[Pose2, Pose3]


def yaw_rotation(theta: float) -> np.ndarray:
    """3x3 rotation by ``theta`` about the ground normal (x toward z)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _same_group(a: Pose, b: Pose) -> None:
    if type(a) is not type(b):
        raise TypeError(f"cannot mix {type(a).__name__} and {type(b).__name__}")


def compose(a: Pose, b: Pose) -> Pose:
    _same_group(a, b)
    if isinstance(a, Pose2):
        c, s = math.cos(a.theta), math.sin(a.theta)
        return Pose2(a.x + c * b.x - s * b.z, a.z + s * b.x + c * b.z, a.theta + b.theta)
    return Pose3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    if isinstance(a, Pose2):
        c, s = math.cos(a.theta), math.sin(a.theta)
        return Pose2(-(c * a.x + s * a.z), -(-s * a.x + c * a.z), -a.theta)
    rt = a.rotation.T
    return Pose3(rt, -rt @ a.translation)


def relative(src_world: Pose, dst_world: Pose) -> Pose:
    """Pose of ``dst`` expressed in the frame of ``src``.

    Differences are taken before rotating, so relative(T, T) is exactly the
    identity.
    """
    _same_group(src_world, dst_world)
    if isinstance(src_world, Pose2):
        c, s = math.cos(src_world.theta), math.sin(src_world.theta)
        dx, dz = dst_world.x - src_world.x, dst_world.z - src_world.z
        return Pose2(c * dx + s * dz, -s * dx + c * dz, dst_world.theta - src_world.theta)
    rt = src_world.rotation.T
    return Pose3(rt @ dst_world.rotation, rt @ (dst_world.translation - src_world.translation))


# ---------------------------------------------------------------------------
# SO(3) helpers


def hat(w: Sequence[float]) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k @ k
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * k @ k


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix.

    At exactly pi the axis sign is ambiguous; the representative with a
    positive largest-magnitude component is returned.
    """
    r = np.asarray(r, dtype=float)
    cos_theta = 0.5 * (np.trace(r) - 1.0)
    vee = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    sin_theta = float(np.linalg.norm(vee))
    theta = math.atan2(sin_theta, cos_theta)
    if theta < SMALL_ANGLE:
        return vee * (1.0 + theta**2 / 6.0)
    if math.pi - theta < 1e-4:
        # (S + I) / 2 -> a a^T as theta -> pi, with S the symmetric part of R
        b = 0.5 * (0.5 * (r + r.T) + np.eye(3))
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / np.linalg.norm(b[:, i])
        ref = float(np.dot(axis, vee))
        if abs(ref) > 1e-15:
            if ref < 0:
                axis = -axis
        elif axis[int(np.argmax(np.abs(axis)))] < 0:
            axis = -axis
        return axis * theta
    return vee * (theta / sin_theta)


def so3_right_jacobian_inv(w: Sequence[float]) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0 + theta**2 / 720.0
    else:
        coeff = 1.0 / theta**2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * k + coeff * k @ k


# ---------------------------------------------------------------------------
# exponential maps used for on-manifold increments


def se2_exp(xi: Sequence[float]) -> Pose2:
    rho_x, rho_z, phi = (float(v) for v in xi)
    if abs(phi) < SMALL_ANGLE:
        a, b = 1.0 - phi**2 / 6.0, phi / 2.0 - phi**3 / 24.0
    else:
        a, b = math.sin(phi) / phi, (1.0 - math.cos(phi)) / phi
    return Pose2(a * rho_x - b * rho_z, b * rho_x + a * rho_z, phi)


def se3_exp(xi: Sequence[float]) -> Pose3:
    """Exponential with tangent ordering (rho, omega)."""
    xi = np.asarray(xi, dtype=float)
    rho, w = xi[:3], xi[3:]
    theta = float(np.linalg.norm(w))
    k = hat(w)
    if theta < SMALL_ANGLE:
        v = np.eye(3) + 0.5 * k + k @ k / 6.0
    else:
        v = (
            np.eye(3)
            + (1.0 - math.cos(theta)) / theta**2 * k
            + (theta - math.sin(theta)) / theta**3 * k @ k
        )
    return Pose3(so3_exp(w), v @ rho)


def retract(p: Pose, delta: Sequence[float]) -> Pose:
    """Right-multiplicative update ``p * exp(delta)``."""
    if isinstance(p, Pose2):
        return compose(p, se2_exp(delta))
    return compose(p, se3_exp(delta))


def error_from_transform(u: Pose) -> np.ndarray:
    """Error vector: translation then yaw (SE(2)) or axis-angle (SE(3))."""
    if isinstance(u, Pose2):
        return np.array([u.x, u.z, u.theta])
    return np.concatenate([u.translation, so3_log(u.rotation)])


def project_to_se2(t: Pose3) -> Pose2:
    """Drop a 3D pose onto the ground plane, keeping the heading of +z."""
    fwd = t.rotation[:, 2]
    if math.hypot(fwd[0], fwd[2]) < HEADING_EPS:
        raise DegenerateHeadingError("forward axis is vertical; heading undefined")
    return Pose2(t.translation[0], t.translation[2], math.atan2(-fwd[0], fwd[2]))


def dof(p: Pose) -> int:
    return 3 if isinstance(p, Pose2) else 6


def poses_allclose(a: Pose, b: Pose, atol: float = 1e-9) -> bool:
    _same_group(a, b)
    if isinstance(a, Pose2):
        d = relative(a, b)
        return abs(d.x) <= atol and abs(d.z) <= atol and abs(d.theta) <= atol
    return bool(
        np.allclose(a.rotation, b.rotation, atol=atol)
        and np.allclose(a.translation, b.translation, atol=atol)
    )
