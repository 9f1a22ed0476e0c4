import math

import numpy as np
import pytest
from hypothesis import given, settings

from bevslam.geometry import (
    DegenerateHeadingError,
    Pose2,
    Pose3,
    compose,
    error_from_transform,
    inverse,
    project_to_se2,
    relative,
    so3_exp,
    so3_log,
    wrap_angle,
    yaw_rotation,
)

from conftest import pose2s, pose3s


def mat2(p: Pose2) -> np.ndarray:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.z], [0.0, 0.0, 1.0]])


def from_mat2(m: np.ndarray) -> tuple:
    return (m[0, 2], m[1, 2], math.atan2(m[1, 0], m[0, 0]))


def close2(p: Pose2, ref, atol=1e-12) -> bool:
    dx, dz = p.x - ref[0], p.z - ref[1]
    return abs(dx) < atol and abs(dz) < atol and abs(wrap_angle(p.theta - ref[2])) < atol


# -- worked values ----------------------------------------------------------


def test_compose_identity_is_neutral():
    t = Pose2(1.0, -2.0, 0.3)
    assert close2(compose(Pose2(), t), (1.0, -2.0, 0.3))
    assert close2(compose(t, Pose2()), (1.0, -2.0, 0.3))


def test_compose_worked_example_matches_matrix_product():
    a, b = Pose2(1.0, 0.0, math.pi / 2), Pose2(1.0, 0.0, 0.0)
    ref = from_mat2(mat2(a) @ mat2(b))
    assert close2(compose(a, b), ref)
    assert close2(compose(a, b), (1.0, 1.0, math.pi / 2))


def test_inverse_examples():
    assert close2(inverse(Pose2()), (0.0, 0.0, 0.0))
    assert close2(inverse(Pose2(1.0, 0.0, 0.0)), (-1.0, 0.0, 0.0))
    p = Pose2(1.0, 1.0, math.pi / 2)
    assert close2(inverse(p), from_mat2(np.linalg.inv(mat2(p))))
    assert close2(inverse(p), (-1.0, 1.0, -math.pi / 2))


def test_relative_examples():
    t = Pose2(0.4, -3.0, 2.0)
    assert close2(relative(t, t), (0.0, 0.0, 0.0))
    assert close2(relative(Pose2(), t), (0.4, -3.0, 2.0))
    assert close2(relative(Pose2(1.0, 0.0, math.pi / 2), Pose2(1.0, 1.0, math.pi / 2)), (1.0, 0.0, 0.0))


def test_error_from_transform_examples():
    assert np.array_equal(error_from_transform(Pose2()), np.zeros(3))
    assert np.allclose(error_from_transform(Pose2(1.0, 2.0, 0.0)), [1.0, 2.0, 0.0], atol=0)
    c, s = math.cos(0.3), math.sin(0.3)
    ry = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])  # 0.3 rad about +y
    e = error_from_transform(Pose3(ry, np.zeros(3)))
    assert np.allclose(e, [0, 0, 0, 0, 0.3, 0], atol=1e-12)


def test_so3_log_near_zero_and_at_pi():
    w = np.array([1e-8, -2e-8, 3e-9])
    assert np.allclose(so3_log(so3_exp(w)), w, atol=1e-15)
    r = so3_exp([0.0, math.pi, 0.0])
    w = so3_log(r)
    assert np.isclose(np.linalg.norm(w), math.pi)
    assert w[np.argmax(np.abs(w))] > 0  # largest component positive at exactly pi
    assert np.allclose(so3_exp(w), r, atol=1e-12)


def test_project_to_se2_examples():
    assert close2(project_to_se2(Pose3()), (0.0, 0.0, 0.0))
    p = Pose3(yaw_rotation(0.7), np.array([2.0, -1.0, 5.0]))
    assert close2(project_to_se2(p), (2.0, 5.0, 0.7))
    # pitch about the camera x axis applied after the yaw leaves the heading alone
    c, s = math.cos(0.1), math.sin(0.1)
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    q = project_to_se2(Pose3(yaw_rotation(0.5) @ pitch, np.zeros(3)))
    assert abs(q.theta - 0.5) < 1e-9


def test_project_to_se2_vertical_forward_axis_raises():
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    pitch = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    with pytest.raises(DegenerateHeadingError):
        project_to_se2(Pose3(pitch, np.zeros(3)))


def test_pose3_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose3(2.0 * np.eye(3), np.zeros(3))


def test_theta_wrapped_on_construction():
    assert Pose2(0, 0, 3 * math.pi).theta == pytest.approx(math.pi)
    assert Pose2(0, 0, -math.pi).theta == pytest.approx(math.pi)


# -- group laws ------------------------------------------------------------


@settings(max_examples=1000)
@given(pose2s(), pose2s(), pose2s())
def test_se2_group_laws(a, b, c):
    lhs, rhs = compose(compose(a, b), c), compose(a, compose(b, c))
    assert close2(lhs, (rhs.x, rhs.z, rhs.theta), atol=1e-10)
    assert close2(compose(a, inverse(a)), (0.0, 0.0, 0.0), atol=1e-12)
    assert -math.pi < lhs.theta <= math.pi


@settings(max_examples=1000)
@given(pose3s(), pose3s(), pose3s())
def test_se3_group_laws(a, b, c):
    lhs, rhs = compose(compose(a, b), c), compose(a, compose(b, c))
    assert np.allclose(lhs.rotation, rhs.rotation, atol=1e-10)
    assert np.allclose(lhs.translation, rhs.translation, atol=1e-10)
    ident = compose(a, inverse(a))
    assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(ident.translation, 0.0, atol=1e-12)


@given(pose2s(), pose2s())
def test_relative_inverts_compose(a, b):
    r = compose(a, relative(a, b))
    assert close2(r, (b.x, b.z, b.theta), atol=1e-12)


@given(pose2s())
def test_error_of_self_relative_is_exactly_zero_se2(t):
    assert np.array_equal(error_from_transform(relative(t, t)), np.zeros(3))


@given(pose3s())
def test_error_of_self_relative_is_exactly_zero_se3(t):
    assert np.array_equal(error_from_transform(relative(t, t)), np.zeros(6))


@given(pose2s())
def test_project_recovers_planar_pose(p):
    q = project_to_se2(Pose3.from_pose2(p))
    assert close2(q, (p.x, p.z, p.theta), atol=1e-12)
