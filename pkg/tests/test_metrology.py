import math
import statistics

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from bevslam.geometry import Pose2, Pose3, yaw_rotation
from bevslam.metrology import (
    BehindCameraError,
    BevBox,
    CameraModel,
    DegenerateStepError,
    Detection,
    HorizonError,
    NoMeasurementError,
    VehicleMeasurement,
    apply_scale,
    backproject_ground,
    cv_weight,
    estimate_scale,
    fuse_vehicle_measurements,
    metric_step_from_ground_points,
    moving_median_scales,
    read_detections,
    vehicle_bev_from_box2d,
    write_detections,
)

CAM = CameraModel.from_intrinsics(700.0, 700.0, 600.0, 200.0, 1.5)


def test_worked_backprojections_are_exact():
    assert np.array_equal(backproject_ground((600, 900), CAM), [0.0, 1.5, 1.5])
    assert np.array_equal(backproject_ground((1300, 900), CAM), [1.5, 1.5, 1.5])


def test_horizon_pixel_raises():
    with pytest.raises(HorizonError):
        backproject_ground((600, 200), CAM)


def test_pixel_above_horizon_is_behind_camera():
    with pytest.raises(BehindCameraError):
        backproject_ground((600, 100), CAM)


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel.from_intrinsics(-1.0, 700.0, 600.0, 200.0, 1.5)
    with pytest.raises(ValueError):
        CameraModel.from_intrinsics(700.0, 700.0, 600.0, 200.0, 0.0)
    with pytest.raises(ValueError):
        CameraModel.from_intrinsics(700.0, 700.0, 600.0, 200.0, 1.5, n=(0.0, -2.0, 0.0))
    assert np.array_equal(CAM.n, [0.0, -1.0, 0.0])


def test_camera_text_round_trip(tmp_path):
    cam = CameraModel.from_intrinsics(712.3, 698.1, 601.25, 187.5, 1.65, n=(0.0, -math.cos(0.01), math.sin(0.01)))
    path = tmp_path / "camera.txt"
    cam.save(path)
    back = CameraModel.load(path)
    assert np.array_equal(back.k, cam.k) and back.h == cam.h and np.array_equal(back.n, cam.n)


def test_box2d_localisation():
    det = Detection(0, 1, (500.0, 700.0, 700.0, 900.0))
    assert vehicle_bev_from_box2d(det, CAM) == (0.0, 1.5)
    a = Detection(0, 1, (650.0, 300.0, 820.0, 420.0))
    b = Detection(0, 1, (2 * 600 - 820.0, 300.0, 2 * 600 - 650.0, 420.0))  # mirrored about cx
    xa, za = vehicle_bev_from_box2d(a, CAM)
    xb, zb = vehicle_bev_from_box2d(b, CAM)
    assert xb == pytest.approx(-xa, abs=1e-12) and zb == pytest.approx(za, abs=1e-12)
    with pytest.raises(HorizonError):
        vehicle_bev_from_box2d(Detection(0, 1, (500.0, 100.0, 700.0, 200.0)), CAM)


def test_detection_validation():
    with pytest.raises(ValueError):
        Detection(0, 1, (10.0, 0.0, 5.0, 20.0))
    with pytest.raises(ValueError):
        Detection(0, 1, (0.0, 0.0, 5.0, 20.0), depth=0.0)


def test_fuse_endpoints_and_midpoint():
    near = fuse_vehicle_measurements((1.0, 5.0, 0.2), (3.0, 5.5), 5.0)
    assert near.position == (1.0, 5.0) and near.weight == 1000.0 and near.yaw == 0.2
    far = fuse_vehicle_measurements((1.0, 40.0, 0.2), (3.0, 41.0), 40.0)
    assert far.position == (3.0, 41.0) and far.weight == 10.0
    mid = fuse_vehicle_measurements((1.0, 20.0, 0.0), (3.0, 20.0), 20.0)
    # independent evaluation of the blend: w = (20 - 10) / (30 - 10)
    w = 0.5
    assert mid.position == pytest.approx(((1 - w) * 1.0 + w * 3.0, 20.0))
    assert mid.weight == pytest.approx(1000.0 + w * (10.0 - 1000.0))
    assert mid.weight == pytest.approx(505.0)


def test_fuse_single_source_and_errors():
    only_box = fuse_vehicle_measurements(None, (2.0, 12.0), 12.0)
    assert only_box.yaw is None and only_box.position == (2.0, 12.0)
    with pytest.raises(NoMeasurementError):
        fuse_vehicle_measurements(None, None, 12.0)
    with pytest.raises(ValueError):
        VehicleMeasurement((0.0, 1.0), None, 5000.0)


@given(st.floats(0.01, 100.0), st.floats(0.01, 100.0))
def test_cv_weight_monotone_and_clamped(a, b):
    lo, hi = sorted((a, b))
    assert 10.0 <= cv_weight(hi) <= cv_weight(lo) <= 1000.0


def test_estimate_scale_examples():
    raw = [1.0] * 5
    assert estimate_scale(raw, [2.0, 2.1, 1.9, 2.0, 10.0], window=5) == 2.0
    assert estimate_scale([0.5, 2.0, 1.5], [0.35, 1.4, 1.05], window=3) == pytest.approx(0.7, abs=1e-15)
    assert estimate_scale([2.0], [3.0], window=1) == 1.5


def test_estimate_scale_errors():
    with pytest.raises(ValueError):
        estimate_scale([], [], 1)
    with pytest.raises(DegenerateStepError):
        estimate_scale([1.0, 0.0], [1.0, 1.0], 1)
    with pytest.raises(ValueError):
        estimate_scale([1.0, 1.0], [1.0, 1.0], 2)


@given(
    st.lists(st.floats(0.5, 3.0), min_size=3, max_size=15),
    st.integers(0, 100),
    st.floats(-1e3, 1e3),
    st.sampled_from([3, 5, 7, 11]),
)
def test_estimate_scale_matches_sorted_median_and_ignores_one_outlier(base, pos, outlier, window):
    raw = np.ones(len(base))
    ratios = np.array(base)
    ref = sorted(ratios[-window:])[len(ratios[-window:]) // 2] if len(ratios[-window:]) % 2 else statistics.median(ratios[-window:])
    assert estimate_scale(raw, ratios, window) == pytest.approx(ref, abs=1e-12)
    # identical inliers: a single corrupted ratio leaves the median alone
    assume(min(window, len(base)) >= 3)
    flat = np.full(len(base), 1.7)
    flat[-1 - pos % min(window, len(base))] = outlier
    assert estimate_scale(raw, flat, window) == 1.7


def test_moving_median_is_causal():
    raw = [1.0] * 6
    metric = [2.0, 2.0, 2.0, 4.0, 4.0, 4.0]
    s = moving_median_scales(raw, metric, window=3)
    assert list(s) == [2.0, 2.0, 2.0, 2.0, 4.0, 4.0]


def test_apply_scale():
    traj = [Pose2(1.0, 2.0, 0.3), Pose2(-1.0, 0.5, -2.0)]
    assert apply_scale(traj, 1.0) == traj
    assert apply_scale(traj, 2.0)[0] == Pose2(2.0, 4.0, 0.3)
    back = apply_scale(apply_scale(traj, 3.0), 1.0 / 3.0)
    for a, b in zip(back, traj):
        assert abs(a.x - b.x) < 1e-12 and abs(a.z - b.z) < 1e-12 and a.theta == b.theta
    p3 = apply_scale([Pose3(yaw_rotation(0.4), np.array([1.0, 2.0, 3.0]))], 2.0)[0]
    assert np.array_equal(p3.translation, [2.0, 4.0, 6.0])
    with pytest.raises(ValueError):
        apply_scale(traj, 0.0)


def test_metric_step_from_ground_points():
    step = Pose2(0.3, 1.2, 0.05)
    world = np.array([[-2.0, 5.0], [2.0, 8.0], [1.0, 12.0]])
    prev = world  # camera at the origin
    c, s = math.cos(step.theta), math.sin(step.theta)
    rt = np.array([[c, s], [-s, c]])
    nxt = (world - [step.x, step.z]) @ rt.T
    assert metric_step_from_ground_points(prev, nxt, step.theta) == pytest.approx(math.hypot(0.3, 1.2), abs=1e-12)


def _tilted_camera(rng):
    tilt = rng.uniform(-0.05, 0.05)
    roll = rng.uniform(-0.03, 0.03)
    n = np.array([math.sin(roll), -math.cos(roll) * math.cos(tilt), math.cos(roll) * math.sin(tilt)])
    n /= np.linalg.norm(n)
    return CameraModel.from_intrinsics(
        rng.uniform(400, 1200), rng.uniform(400, 1200), rng.uniform(300, 900), rng.uniform(150, 450),
        rng.uniform(1.0, 2.5), n,
    )


@given(st.integers(0, 2**32 - 1))
def test_ground_plane_round_trip(seed):
    rng = np.random.default_rng(seed)
    cam = _tilted_camera(rng)
    x, z = rng.uniform(-20, 20), rng.uniform(1, 60)
    y = (-cam.h - cam.n[0] * x - cam.n[2] * z) / cam.n[1]
    p = np.array([x, y, z])
    q = backproject_ground(cam.project(p), cam)
    assert np.abs(q - p).max() < 1e-9
    assert abs(cam.n @ q + cam.h) < 1e-9


def test_detections_csv_round_trip(tmp_path):
    dets = [
        Detection(0, 3, (1.0 / 3.0, 2.0, 5.5, 9.25), BevBox(0.1, 12.345678901234567, -0.3), 12.3),
        Detection(4, 1, (1.0, 2.0, 3.0, 4.0)),
    ]
    path = tmp_path / "detections.csv"
    write_detections(path, dets)
    assert path.read_text().splitlines()[0] == "frame,track_id,u_min,v_min,u_max,v_max,bev_x,bev_z,bev_yaw,depth"
    assert read_detections(path) == dets
