"""Single-view metrology on a flat ground plane.

Ground pixels are lifted to metric camera-frame points using the known camera
height, vehicles are localised from 2D boxes and BEV boxes, and scale-ambiguous
odometry is brought to metric units with a moving median of step ratios.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .geometry import Pose, Pose2, Pose3

HORIZON_EPS = 1e-9
MIN_STEP = 1e-9

# CV weight range and the depths at which each localisation source dominates.
CV_WEIGHT_NEAR = 1000.0
CV_WEIGHT_FAR = 10.0
D_NEAR = 10.0
D_FAR = 30.0

DETECTION_FIELDS = [
    "frame", "track_id", "u_min", "v_min", "u_max", "v_max",
    "bev_x", "bev_z", "bev_yaw", "depth",
]


class HorizonError(ValueError):
    """Pixel ray is parallel to (or above) the ground plane."""


class BehindCameraError(ValueError):
    """Back-projected ground point lies behind the camera."""


class NoMeasurementError(ValueError):
    """Neither localisation source is available."""


class DegenerateStepError(ValueError):
    """A raw odometry step is too short to form a scale ratio."""


@dataclass(frozen=True, eq=False)
class CameraModel:
    k: np.ndarray
    h: float
    n: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))

    def __post_init__(self) -> None:
        k = np.array(self.k, dtype=float).reshape(3, 3)
        n = np.array(self.n, dtype=float).reshape(3)
        if k[1, 0] != 0 or not np.array_equal(k[2], [0.0, 0.0, 1.0]):
            raise ValueError("intrinsics must be upper triangular with last row (0, 0, 1)")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.h > 0:
            raise ValueError("camera height must be positive")
        if abs(np.linalg.norm(n) - 1.0) > 1e-12:
            raise ValueError("ground normal must be unit length")
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "h", float(self.h))

    @classmethod
    def from_intrinsics(
        cls, fx: float, fy: float, cx: float, cy: float, h: float,
        n: Sequence[float] = (0.0, -1.0, 0.0),
    ) -> "CameraModel":
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), h, np.asarray(n))

    @property
    def fx(self) -> float:
        return float(self.k[0, 0])

    @property
    def fy(self) -> float:
        return float(self.k[1, 1])

    @property
    def cx(self) -> float:
        return float(self.k[0, 2])

    @property
    def cy(self) -> float:
        return float(self.k[1, 2])

    def project(self, p: Sequence[float]) -> np.ndarray:
        """Perspective projection of a camera-frame point to pixels."""
        q = self.k @ np.asarray(p, dtype=float)
        return q[:2] / q[2]

    def unproject(self, pixel: Sequence[float]) -> np.ndarray:
        """K^-1 (u, v, 1), by back-substitution on the upper-triangular K."""
        k = self.k
        y = (pixel[1] - k[1, 2]) / k[1, 1]
        x = (pixel[0] - k[0, 2] - k[0, 1] * y) / k[0, 0]
        return np.array([x, y, 1.0])

    def to_text(self) -> str:
        k = self.k
        return (
            f"{k[0, 0]:.17g} {k[1, 1]:.17g} {k[0, 2]:.17g} {k[1, 2]:.17g}\n"
            f"{self.h:.17g}\n"
            f"{self.n[0]:.17g} {self.n[1]:.17g} {self.n[2]:.17g}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "CameraModel":
        lines = [ln.split() for ln in text.splitlines() if ln.strip()]
        if len(lines) != 3 or len(lines[0]) != 4 or len(lines[1]) != 1 or len(lines[2]) != 3:
            raise ValueError("camera file must hold 'fx fy cx cy', 'H' and 'nx ny nz'")
        fx, fy, cx, cy = (float(v) for v in lines[0])
        return cls.from_intrinsics(fx, fy, cx, cy, float(lines[1][0]), [float(v) for v in lines[2]])

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: Path) -> "CameraModel":
        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class BevBox:
    x: float
    z: float
    yaw: float
    length: Optional[float] = None
    width: Optional[float] = None


@dataclass(frozen=True)
class Detection:
    frame: int
    track_id: int
    box2d: tuple[float, float, float, float]
    bev3d: Optional[BevBox] = None
    depth: Optional[float] = None

    def __post_init__(self) -> None:
        u0, v0, u1, v1 = self.box2d
        if not (u0 < u1 and v0 < v1):
            raise ValueError(f"invalid box {self.box2d}")
        if self.depth is not None and not self.depth > 0:
            raise ValueError("depth must be positive")


@dataclass(frozen=True)
class VehicleMeasurement:
    position: tuple[float, float]
    yaw: Optional[float]
    weight: float

    def __post_init__(self) -> None:
        if not CV_WEIGHT_FAR <= self.weight <= CV_WEIGHT_NEAR:
            raise ValueError(f"weight {self.weight} outside [10, 1000]")

    def as_pose(self, yaw_fallback: float = 0.0) -> Pose2:
        return Pose2(self.position[0], self.position[1], yaw_fallback if self.yaw is None else self.yaw)


def backproject_ground(pixel: Sequence[float], cam: CameraModel) -> np.ndarray:
    """Lift a ground pixel to a metric point in the camera frame.

    X = -H K^-1 x / (n^T K^-1 x) for the homogeneous pixel x = (u, v, 1).
    """
    ray = cam.unproject(pixel)
    denom = float(cam.n @ ray)
    if abs(denom) < HORIZON_EPS:
        raise HorizonError(f"pixel {tuple(pixel)} lies on the horizon")
    point = -cam.h * ray / denom
    if point[2] <= 0:
        raise BehindCameraError(f"pixel {tuple(pixel)} maps behind the camera")
    return point


def vehicle_bev_from_box2d(det: Detection, cam: CameraModel) -> tuple[float, float]:
    u0, _, u1, v1 = det.box2d
    p = backproject_ground(((u0 + u1) / 2.0, v1), cam)
    return float(p[0]), float(p[2])


def cv_weight(depth: float, d_near: float = D_NEAR, d_far: float = D_FAR) -> float:
    """Depth-gauged CV confidence, linear from 1000 (near) down to 10 (far)."""
    if depth <= d_near:
        return CV_WEIGHT_NEAR
    if depth >= d_far:
        return CV_WEIGHT_FAR
    w = (depth - d_near) / (d_far - d_near)
    return CV_WEIGHT_NEAR + w * (CV_WEIGHT_FAR - CV_WEIGHT_NEAR)


def fuse_vehicle_measurements(
    from_bev3d: Optional[tuple[float, float, float]],
    from_box2d: Optional[tuple[float, float]],
    depth: float,
    d_near: float = D_NEAR,
    d_far: float = D_FAR,
) -> VehicleMeasurement:
    """Combine the BEV-box and box-bottom localisations of one vehicle.

    The BEV box wins up close, the 2D box bottom far away, and positions are
    blended linearly in between.
    """
    if from_bev3d is None and from_box2d is None:
        raise NoMeasurementError("no localisation source for vehicle")
    if not depth > 0:
        raise ValueError("depth must be positive")
    weight = cv_weight(depth, d_near, d_far)
    yaw = None if from_bev3d is None else float(from_bev3d[2])
    if from_bev3d is None:
        pos = (float(from_box2d[0]), float(from_box2d[1]))
    elif from_box2d is None:
        pos = (float(from_bev3d[0]), float(from_bev3d[1]))
    elif depth <= d_near:
        pos = (float(from_bev3d[0]), float(from_bev3d[1]))
    elif depth >= d_far:
        pos = (float(from_box2d[0]), float(from_box2d[1]))
    else:
        w = (depth - d_near) / (d_far - d_near)
        pos = (
            (1.0 - w) * from_bev3d[0] + w * from_box2d[0],
            (1.0 - w) * from_bev3d[1] + w * from_box2d[1],
        )
    return VehicleMeasurement(pos, yaw, weight)


def measure_detection(
    det: Detection, cam: CameraModel, d_near: float = D_NEAR, d_far: float = D_FAR
) -> VehicleMeasurement:
    bev = None if det.bev3d is None else (det.bev3d.x, det.bev3d.z, det.bev3d.yaw)
    try:
        box = vehicle_bev_from_box2d(det, cam)
    except (HorizonError, BehindCameraError):
        box = None
    depth = det.depth
    if depth is None:
        depth = bev[1] if bev is not None else (box[1] if box is not None else 0.0)
    return fuse_vehicle_measurements(bev, box, depth, d_near, d_far)


def estimate_scale(
    raw_step_lengths: Sequence[float], metric_step_lengths: Sequence[float], window: int = 11
) -> float:
    """Median of the most recent ``window`` metric/raw step-length ratios."""
    raw = np.asarray(raw_step_lengths, dtype=float)
    metric = np.asarray(metric_step_lengths, dtype=float)
    if raw.size == 0:
        raise ValueError("no steps to estimate scale from")
    if raw.shape != metric.shape:
        raise ValueError("raw and metric step lists differ in length")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if np.any(raw < MIN_STEP):
        raise DegenerateStepError("raw step below 1e-9")
    ratios = metric[-window:] / raw[-window:]
    return float(np.median(ratios))


def moving_median_scales(
    raw_step_lengths: Sequence[float], metric_step_lengths: Sequence[float], window: int = 11
) -> np.ndarray:
    """Causal moving-median scale per step (uses steps up to and including k)."""
    raw = list(raw_step_lengths)
    metric = list(metric_step_lengths)
    return np.array([estimate_scale(raw[: k + 1], metric[: k + 1], window) for k in range(len(raw))])


def apply_scale(trajectory: Iterable[Pose], s: float) -> list[Pose]:
    if not s > 0:
        raise ValueError("scale must be positive")
    out: list[Pose] = []
    for p in trajectory:
        if isinstance(p, Pose2):
            out.append(Pose2(p.x * s, p.z * s, p.theta))
        else:
            out.append(Pose3(p.rotation, p.translation * s))
    return out


def metric_step_from_ground_points(
    prev_points: np.ndarray, next_points: np.ndarray, rotation_step: float
) -> float:
    """Metric camera translation between two frames from matched ground points.

    Points are camera-frame (x, z) observations of the same static road
    features; the heading change comes from the (scale-free) odometry.
    """
    prev_points = np.asarray(prev_points, dtype=float).reshape(-1, 2)
    next_points = np.asarray(next_points, dtype=float).reshape(-1, 2)
    if prev_points.shape[0] == 0 or prev_points.shape != next_points.shape:
        raise ValueError("need matched, non-empty point sets")
    c, s = math.cos(rotation_step), math.sin(rotation_step)
    rot = np.array([[c, -s], [s, c]])
    # p_prev = R p_next + t  =>  t = p_prev - R p_next
    t = prev_points - next_points @ rot.T
    return float(np.linalg.norm(np.median(t, axis=0)))


def _opt(v: str) -> Optional[float]:
    return None if v == "" else float(v)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.17g}"


def write_detections(path: Path, dets: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_FIELDS)
        for d in dets:
            bev = d.bev3d
            w.writerow([
                d.frame, d.track_id, *(_fmt(v) for v in d.box2d),
                _fmt(bev.x if bev else None), _fmt(bev.z if bev else None),
                _fmt(bev.yaw if bev else None), _fmt(d.depth),
            ])


def read_detections(path: Path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTION_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            bx, bz, byaw = _opt(row["bev_x"]), _opt(row["bev_z"]), _opt(row["bev_yaw"])
            bev = None if bx is None or bz is None or byaw is None else BevBox(bx, bz, byaw)
            out.append(Detection(
                int(row["frame"]), int(row["track_id"]),
                (float(row["u_min"]), float(row["v_min"]), float(row["u_max"]), float(row["v_max"])),
                bev, _opt(row["depth"]),
            ))
    return out
