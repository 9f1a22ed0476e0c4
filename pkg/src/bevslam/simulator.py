"""Synthetic driving scenarios and a seeded stand-in for the perception frontend.

Scenarios place an ego camera on a straight, arc or S-shaped path, vehicles
on parallel offsets ahead of it, and lane lines sampled as discrete road
points. ``corrupt`` turns ground truth into noisy odometry, detections and
lane observations; ``build_graph`` wires a dataset into a pose graph.

Gaussian samples come from PCG64 uniforms through the Box-Muller transform,
so the streams are reproducible from the seed alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .builder import FramePayload, GraphBuilder, GraphConfig
from .geometry import Pose2, compose, relative
from .metrology import BevBox, CameraModel, Detection, measure_detection, read_detections, write_detections
from .posegraph import PoseGraph

PATH_KINDS = ("straight", "arc", "s-curve")
VEHICLE_WIDTH = 1.8
VEHICLE_HEIGHT = 1.5
LANE_MIN_Z = 2.0
LANE_MAX_Z = 40.0
DATASET_FILES = (
    "camera.txt", "odometry.csv", "detections.csv", "lanes.csv",
    "gt_ego.csv", "gt_vehicles.csv", "meta.txt",
)


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "straight"
    frames: int = 100
    speed: float = 1.0  # metres per frame
    vehicles: int = 2
    lanes: int = 2
    lane_spacing: float = 3.5
    radius: float = 100.0  # arc radius
    s_period: float = 120.0  # S-curve curvature period (m)
    s_curvature: float = 0.01  # S-curve peak curvature (1/m)
    lane_point_spacing: float = 1.0
    fx: float = 700.0
    fy: float = 700.0
    cx: float = 600.0
    cy: float = 200.0
    camera_height: float = 1.65

    def __post_init__(self) -> None:
        if self.kind not in PATH_KINDS:
            raise ValueError(f"kind must be one of {PATH_KINDS}")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if not self.speed > 0:
            raise ValueError("speed must be positive")
        if self.vehicles < 0 or self.lanes < 0:
            raise ValueError("vehicle and lane counts must be >= 0")
        for name in ("lane_spacing", "radius", "s_period", "lane_point_spacing", "camera_height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def camera(self) -> CameraModel:
        return CameraModel.from_intrinsics(self.fx, self.fy, self.cx, self.cy, self.camera_height)


@dataclass
class Scenario:
    spec: ScenarioSpec
    camera: CameraModel
    ego_gt: list[Pose2]
    vehicles: dict[int, list[tuple[int, Pose2]]]
    lanes: list[np.ndarray]  # dense polylines, one (n, 2) array per lane
    lane_points: np.ndarray  # (n, 2) world road points; row index is the point id
    lane_of_point: np.ndarray  # (n,) lane index of each road point

    @property
    def frames(self) -> int:
        return len(self.ego_gt)

    def lane_map(self) -> dict[int, tuple[float, float]]:
        return {i: (float(x), float(z)) for i, (x, z) in enumerate(self.lane_points)}


def _path_states(spec: ScenarioSpec, s: np.ndarray) -> np.ndarray:
    """(x, z, theta) of the reference path at arc lengths ``s``.

    Positive curvature turns left (heading grows, forward axis swings to -x).
    """
    s = np.asarray(s, dtype=float)
    if spec.kind == "straight":
        return np.stack([np.zeros_like(s), s, np.zeros_like(s)], axis=-1)
    if spec.kind == "arc":
        k = 1.0 / spec.radius
        return np.stack([(np.cos(k * s) - 1.0) / k, np.sin(k * s) / k, k * s], axis=-1)
    # S-curve: curvature k0 sin(2 pi s / L); heading has a closed form,
    # position is integrated numerically on a fine grid
    k0, L = spec.s_curvature, spec.s_period
    w = 2.0 * math.pi / L

    def heading(u):
        return k0 / w * (1.0 - np.cos(w * u))

    lo, hi = min(0.0, float(s.min())), max(0.0, float(s.max()))
    n = max(2, int(math.ceil((hi - lo) / 0.01)) + 1)
    grid = np.linspace(lo, hi, n)
    th = heading(grid)
    xg = cumulative_trapezoid(-np.sin(th), grid, initial=0.0)
    zg = cumulative_trapezoid(np.cos(th), grid, initial=0.0)
    x0, z0 = np.interp(0.0, grid, xg), np.interp(0.0, grid, zg)
    return np.stack([np.interp(s, grid, xg) - x0, np.interp(s, grid, zg) - z0, heading(s)], axis=-1)


def _offset(states: np.ndarray, lateral: float) -> np.ndarray:
    """Shift path states along the body +x axis."""
    out = states.copy()
    out[:, 0] += lateral * np.cos(states[:, 2])
    out[:, 1] += lateral * np.sin(states[:, 2])
    return out


def _vehicle_lateral(j: int, spacing: float) -> float:
    # 0, -1, +1, -2, +2, ... lanes from the ego lane
    if j == 0:
        return 0.0
    step = (j + 1) // 2
    return spacing * (-step if j % 2 else step)


def generate_scenario(spec: Union[ScenarioSpec, dict]) -> Scenario:
    if isinstance(spec, dict):
        spec = ScenarioSpec(**spec)
    s_ego = np.arange(spec.frames) * spec.speed
    ego = [Pose2(*row) for row in _path_states(spec, s_ego)]

    vehicles: dict[int, list[tuple[int, Pose2]]] = {}
    for j in range(spec.vehicles):
        lead = 10.0 + 5.0 * j
        states = _offset(_path_states(spec, s_ego + lead), _vehicle_lateral(j, spec.lane_spacing))
        vehicles[j] = [(f, Pose2(*states[f])) for f in range(spec.frames)]

    s_end = s_ego[-1] + LANE_MAX_Z + 10.0
    s_lane = np.arange(-10.0, s_end + 1e-9, spec.lane_point_spacing)
    centre = _path_states(spec, s_lane)
    lanes, pts, owner = [], [], []
    for k in range(spec.lanes):
        d = spec.lane_spacing * (k - spec.lanes // 2) + spec.lane_spacing / 2.0
        line = _offset(centre, d)[:, :2]
        lanes.append(line)
        pts.append(line)
        owner.append(np.full(len(line), k))
    lane_points = np.concatenate(pts) if pts else np.zeros((0, 2))
    lane_of_point = np.concatenate(owner) if owner else np.zeros(0, dtype=int)
    return Scenario(spec, spec.camera(), ego, vehicles, lanes, lane_points, lane_of_point)


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    seed: int = 0
    odo_sigma_t: float = 0.0
    odo_sigma_r: float = 0.0
    det_sigma: float = 0.0
    odo_scale: float = 1.0
    dropout_prob: float = 0.0
    det_sigma_yaw: float = 0.0
    lane_pixel_sigma: float = 0.0  # pixel noise of lane observations, propagated through the ground lift

    def __post_init__(self) -> None:
        for name in ("odo_sigma_t", "odo_sigma_r", "det_sigma", "det_sigma_yaw", "lane_pixel_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.odo_scale > 0:
            raise ValueError("odo_scale must be positive")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must lie in [0, 1)")


class GaussianStream:
    """Standard normals from PCG64 uniforms via Box-Muller (both outputs used)."""

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.PCG64(seed))
        self._spare: Optional[float] = None

    def uniform(self) -> float:
        return float(self._gen.random())

    def normal(self) -> float:
        if self._spare is not None:
            v, self._spare = self._spare, None
            return v
        u1, u2 = self.uniform(), self.uniform()
        r = math.sqrt(-2.0 * math.log(1.0 - u1))
        self._spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)


@dataclass
class Dataset:
    camera: CameraModel
    odometry: list[Pose2]  # odometry[k] is the step from frame k to k + 1
    detections: list[Detection]
    lanes: list[tuple[int, int, float, float]]  # (frame, point id, x_cam, z_cam)
    gt_ego: list[Pose2]
    gt_vehicles: dict[int, list[tuple[int, Pose2]]]
    spec: ScenarioSpec
    noise: NoiseModel
    lane_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    @property
    def frames(self) -> int:
        return len(self.gt_ego)

    def lane_map(self) -> dict[int, tuple[float, float]]:
        return {i: (float(x), float(z)) for i, (x, z) in enumerate(self.lane_points)}

    def dead_reckoning(self) -> list[Pose2]:
        out = [Pose2()]
        for step in self.odometry:
            out.append(compose(out[-1], step))
        return out

    def payloads(self, d_near: float = 10.0, d_far: float = 30.0) -> Iterator[FramePayload]:
        by_frame: dict[int, list[Detection]] = {}
        for d in self.detections:
            by_frame.setdefault(d.frame, []).append(d)
        lanes_by_frame: dict[int, list[tuple[int, float, float]]] = {}
        for f, pid, x, z in self.lanes:
            lanes_by_frame.setdefault(f, []).append((pid, x, z))
        for f in range(self.frames):
            odo = self.odometry[f - 1] if f > 0 else None
            vehicles = [
                (d.track_id, measure_detection(d, self.camera, d_near, d_far))
                for d in sorted(by_frame.get(f, []), key=lambda d: d.track_id)
            ]
            yield FramePayload(f, odo, vehicles, lanes_by_frame.get(f, []))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.camera.to_text() == other.camera.to_text()
            and self.odometry == other.odometry
            and self.detections == other.detections
            and self.lanes == other.lanes
            and self.gt_ego == other.gt_ego
            and self.gt_vehicles == other.gt_vehicles
            and self.spec == other.spec
            and self.noise == other.noise
            and np.array_equal(self.lane_points, other.lane_points)
        )


def _box2d(cam: CameraModel, x: float, z: float) -> tuple[float, float, float, float]:
    """Image box of a vehicle whose ground contact centre is (x, H, z)."""
    h = cam.h
    u0 = cam.project((x - VEHICLE_WIDTH / 2.0, h, z))[0]
    u1 = cam.project((x + VEHICLE_WIDTH / 2.0, h, z))[0]
    v0 = cam.project((x, h - VEHICLE_HEIGHT, z))[1]
    v1 = cam.project((x, h, z))[1]
    return (u0, v0, u1, v1)


def visible_lane_points(scenario: Scenario, pose: Pose2) -> list[tuple[int, float, float]]:
    """Road points inside the depth band and horizontal field of view."""
    cam = scenario.camera
    if len(scenario.lane_points) == 0:
        return []
    rel = (scenario.lane_points - pose.translation) @ pose.rotation  # R^T (p - t), row-wise
    x, z = rel[:, 0], rel[:, 1]
    half_fov = cam.cx / cam.fx
    keep = (z >= LANE_MIN_Z) & (z <= LANE_MAX_Z) & (np.abs(x) <= half_fov * z)
    return [(int(i), float(x[i]), float(z[i])) for i in np.flatnonzero(keep)]


def corrupt(s: Scenario, n: NoiseModel) -> Dataset:
    """Noisy measurements from ground truth; draw order is fixed so every
    stream is reproducible from the seed."""
    rng = GaussianStream(n.seed)
    odometry = []
    for k in range(1, s.frames):
        gt = relative(s.ego_gt[k - 1], s.ego_gt[k])
        ex, ez, er = rng.normal(), rng.normal(), rng.normal()
        odometry.append(Pose2(
            gt.x * n.odo_scale + n.odo_sigma_t * ex,
            gt.z * n.odo_scale + n.odo_sigma_t * ez,
            gt.theta + n.odo_sigma_r * er,
        ))

    cam = s.camera
    tracks = {k: dict(v) for k, v in sorted(s.vehicles.items())}
    detections = []
    lanes = []
    for f in range(s.frames):
        ego = s.ego_gt[f]
        for track, poses in tracks.items():
            # draws happen even for skipped detections so streams stay aligned
            u = rng.uniform()
            bx, bz, byaw = rng.normal(), rng.normal(), rng.normal()
            cx_, cz_ = rng.normal(), rng.normal()
            if f not in poses or u < n.dropout_prob:
                continue
            rel = relative(ego, poses[f])
            if rel.z <= LANE_MIN_Z:
                continue
            bev = BevBox(rel.x + n.det_sigma * bx, rel.z + n.det_sigma * bz, rel.theta + n.det_sigma_yaw * byaw)
            box = _box2d(cam, rel.x + n.det_sigma * cx_, max(rel.z + n.det_sigma * cz_, 1.0))
            detections.append(Detection(f, track, box, bev, rel.z))
        for pid, x, z in visible_lane_points(s, ego):
            nx, nz = rng.normal(), rng.normal()
            # first-order error of the flat-ground lift for a pixel error sigma:
            # lateral z sigma / fx, depth z^2 sigma / (fy H)
            sx = z * n.lane_pixel_sigma / cam.fx
            sz = z * z * n.lane_pixel_sigma / (cam.fy * cam.h)
            lanes.append((f, pid, x + sx * nx, z + sz * nz))
    return Dataset(
        cam, odometry, detections, lanes, list(s.ego_gt),
        {k: list(v) for k, v in s.vehicles.items()}, s.spec, n, s.lane_points.copy(),
    )


def simulate(spec: Union[ScenarioSpec, dict], noise: NoiseModel) -> Dataset:
    return corrupt(generate_scenario(spec), noise)


def build_graph(d: Dataset, cfg: Optional[GraphConfig] = None) -> PoseGraph:
    """Batch graph with dead-reckoned initial estimates."""
    cfg = cfg or GraphConfig()
    if d.frames == 0:
        raise DatasetError("empty dataset")
    g = PoseGraph(cfg.mode)
    builder = make_builder(d, cfg)
    for payload in d.payloads(cfg.d_near, cfg.d_far):
        builder.extend(g, payload)
    return g


def make_builder(d: Dataset, cfg: GraphConfig) -> GraphBuilder:
    return GraphBuilder(cfg, d.camera.h, d.lane_map())


# ---------------------------------------------------------------------------
# dataset directory I/O


def _f(v: float) -> str:
    return f"{float(v):.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_csv(path: Path, header: list[str]) -> list[list[str]]:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path.name}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise DatasetError(f"{path.name}: expected header {header}, got {got}")
        return [row for row in reader if row]


def _meta_text(d: Dataset) -> str:
    lines = ["# bevslam synthetic dataset", "# noise: numpy PCG64 uniforms, Box-Muller normals"]
    lines.append(f"seed={d.noise.seed}")
    for f_ in fields(d.spec):
        lines.append(f"spec.{f_.name}={getattr(d.spec, f_.name)!r}")
    for f_ in fields(d.noise):
        if f_.name != "seed":
            lines.append(f"noise.{f_.name}={getattr(d.noise, f_.name)!r}")
    return "\n".join(lines) + "\n"


def _parse_meta(text: str) -> tuple[ScenarioSpec, NoiseModel]:
    spec_kw: dict = {}
    noise_kw: dict = {}
    types_spec = {f_.name: f_.type for f_ in fields(ScenarioSpec)}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        if key == "seed":
            noise_kw["seed"] = int(value)
        elif key.startswith("spec."):
            name = key[5:]
            if name not in types_spec:
                raise DatasetError(f"meta.txt: unknown key {key}")
            kind = str(types_spec[name])
            spec_kw[name] = value.strip("'\"") if kind in ("str", "<class 'str'>") else (
                int(value) if kind in ("int", "<class 'int'>") else float(value)
            )
        elif key.startswith("noise."):
            noise_kw[key[6:]] = float(value)
        else:
            raise DatasetError(f"meta.txt: unknown key {key}")
    return ScenarioSpec(**spec_kw), NoiseModel(**noise_kw)


def save_dataset(d: Dataset, directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    d.camera.save(directory / "camera.txt")
    _write_csv(directory / "odometry.csv", ["frame", "dx", "dz", "dtheta"],
               [[k + 1, _f(p.x), _f(p.z), _f(p.theta)] for k, p in enumerate(d.odometry)])
    write_detections(directory / "detections.csv", d.detections)
    _write_csv(directory / "lanes.csv", ["frame", "point_id", "x_cam", "z_cam"],
               [[f, pid, _f(x), _f(z)] for f, pid, x, z in d.lanes])
    _write_csv(directory / "gt_ego.csv", ["frame", "x", "z", "theta"],
               [[k, _f(p.x), _f(p.z), _f(p.theta)] for k, p in enumerate(d.gt_ego)])
    rows = []
    for track in sorted(d.gt_vehicles):
        rows += [[f, track, _f(p.x), _f(p.z), _f(p.theta)] for f, p in d.gt_vehicles[track]]
    rows.sort(key=lambda r: (r[0], r[1]))
    _write_csv(directory / "gt_vehicles.csv", ["frame", "track", "x", "z", "theta"], rows)
    (directory / "meta.txt").write_text(_meta_text(d))


def load_dataset(directory: Path) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(f"dataset directory not found: {directory}")
    for name in DATASET_FILES:
        if not (directory / name).exists():
            raise DatasetError(f"missing dataset file: {name}")
    spec, noise = _parse_meta((directory / "meta.txt").read_text())
    camera = CameraModel.load(directory / "camera.txt")
    odo_rows = _read_csv(directory / "odometry.csv", ["frame", "dx", "dz", "dtheta"])
    odometry = [Pose2(float(r[1]), float(r[2]), float(r[3])) for r in odo_rows]
    detections = read_detections(directory / "detections.csv")
    lanes = [(int(r[0]), int(r[1]), float(r[2]), float(r[3]))
             for r in _read_csv(directory / "lanes.csv", ["frame", "point_id", "x_cam", "z_cam"])]
    gt_ego = [Pose2(float(r[1]), float(r[2]), float(r[3]))
              for r in _read_csv(directory / "gt_ego.csv", ["frame", "x", "z", "theta"])]
    gt_vehicles: dict[int, list[tuple[int, Pose2]]] = {}
    for r in _read_csv(directory / "gt_vehicles.csv", ["frame", "track", "x", "z", "theta"]):
        gt_vehicles.setdefault(int(r[1]), []).append((int(r[0]), Pose2(float(r[2]), float(r[3]), float(r[4]))))
    if len(odometry) != len(gt_ego) - 1:
        raise DatasetError("odometry.csv must hold one step per frame after the first")
    # the static lane map is not stored; it is regenerated from the recorded spec
    lane_points = generate_scenario(spec).lane_points
    return Dataset(camera, odometry, detections, lanes, gt_ego, dict(sorted(gt_vehicles.items())),
                   spec, noise, lane_points)


def spec_dict(spec: ScenarioSpec) -> dict:
    return asdict(spec)
