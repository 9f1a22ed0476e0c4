"""Trajectory scoring, constraint ablations, parameter sweeps and timing.

ATE is the RMS of per-frame (x, z) distances in the shared world frame
anchored by the fixed first camera; no alignment is applied, since an
alignment would hide exactly the drift being measured.
"""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .builder import GraphConfig
from .geometry import Pose, Pose2, compose, project_to_se2
from .optimizer import NumericalFailure, SolveReport, SolverConfig, optimize_batch, optimize_incremental
from .posegraph import NodeKind, PoseGraph
from .simulator import Dataset, make_builder

RESULT_FIELDS = ["config", "agent", "frames", "ate_rms_m"]
TIMING_FIELDS = ["frame", "objects", "time_s"]
FAMILY_CONFIGS = ("without_CC", "without_VV", "without_CV", "without_CP", "with_all")
CP_WEIGHTS = {"low": 1000.0, "medium": 10000.0, "high": 100000.0}
DEPTH_THRESHOLDS = (12.0, 15.0, 18.0, 20.0, math.inf)


class EvaluationError(ValueError):
    pass


@dataclass
class TrajectoryEstimate:
    agent: str  # "ego" or "vehicle_<track>"
    poses: dict[int, Pose2] = field(default_factory=dict)

    def __post_init__(self) -> None:
        poses = {}
        for f in sorted(self.poses):
            p = self.poses[f]
            poses[int(f)] = p if isinstance(p, Pose2) else project_to_se2(p)
        self.poses = poses

    @property
    def frames(self) -> list[int]:
        return list(self.poses)

    def path_length(self) -> float:
        pts = np.array([p.translation for p in self.poses.values()])
        if len(pts) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


@dataclass
class AteResult:
    agent: str
    rms: float
    per_frame_errors: list[float]
    frames: list[int] = field(default_factory=list)


def ate_rms(est: TrajectoryEstimate, gt: TrajectoryEstimate) -> AteResult:
    frames = sorted(set(est.poses) & set(gt.poses))
    if not frames:
        raise EvaluationError(f"no common frames for {est.agent}")
    errs = [
        math.hypot(est.poses[f].x - gt.poses[f].x, est.poses[f].z - gt.poses[f].z)
        for f in frames
    ]
    rms = math.sqrt(sum(e * e for e in errs) / len(errs))
    return AteResult(est.agent, rms, errs, frames)


def ego_agent() -> str:
    return "ego"


def vehicle_agent(track: int) -> str:
    return f"vehicle_{track}"


# ---------------------------------------------------------------------------
# trajectories from graphs and datasets


def trajectories(g: PoseGraph) -> dict[str, TrajectoryEstimate]:
    ego: dict[int, Pose] = {}
    vehicles: dict[int, dict[int, Pose]] = {}
    for n in g.nodes.values():
        if n.kind is NodeKind.CAMERA:
            ego[n.index] = n.estimate
        elif n.kind is NodeKind.VEHICLE:
            vehicles.setdefault(n.track, {})[n.index] = n.estimate
    out = {ego_agent(): TrajectoryEstimate(ego_agent(), ego)}
    for track in sorted(vehicles):
        out[vehicle_agent(track)] = TrajectoryEstimate(vehicle_agent(track), vehicles[track])
    return out


def ground_truth(d: Dataset) -> dict[str, TrajectoryEstimate]:
    out = {ego_agent(): TrajectoryEstimate(ego_agent(), dict(enumerate(d.gt_ego)))}
    for track in sorted(d.gt_vehicles):
        out[vehicle_agent(track)] = TrajectoryEstimate(vehicle_agent(track), dict(d.gt_vehicles[track]))
    return out


def raw_trajectories(d: Dataset, cfg: Optional[GraphConfig] = None) -> dict[str, TrajectoryEstimate]:
    """Dead-reckoned ego and detections placed relative to it (no optimisation)."""
    cfg = cfg or GraphConfig()
    dr = d.dead_reckoning()
    out = {ego_agent(): TrajectoryEstimate(ego_agent(), dict(enumerate(dr)))}
    vehicles: dict[int, dict[int, Pose2]] = {}
    for payload in d.payloads(cfg.d_near, cfg.d_far):
        cam = dr[payload.frame]
        for track, meas in payload.vehicles:
            yaw = meas.yaw if meas.yaw is not None else 0.0
            vehicles.setdefault(track, {})[payload.frame] = compose(cam, Pose2(*meas.position, yaw))
    for track in sorted(vehicles):
        out[vehicle_agent(track)] = TrajectoryEstimate(vehicle_agent(track), vehicles[track])
    return out


def score(est: dict[str, TrajectoryEstimate], gt: dict[str, TrajectoryEstimate]) -> dict[str, AteResult]:
    return {a: ate_rms(t, gt[a]) for a, t in est.items() if a in gt and set(t.poses) & set(gt[a].poses)}


# ---------------------------------------------------------------------------
# running the backend on a dataset


@dataclass
class RunResult:
    graph: PoseGraph
    reports: list[SolveReport]
    error: Optional[str] = None


def solve_dataset(
    d: Dataset,
    graph_cfg: Optional[GraphConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    mode: str = "batch",
    on_step: Optional[Callable[[PoseGraph, SolveReport], None]] = None,
) -> RunResult:
    """Build and optimise a dataset in batch or incremental mode.

    A numerical failure is recorded in ``error`` with the graph left at the
    best estimates found. ``on_step`` sees the graph after every solve.
    """
    graph_cfg = graph_cfg or GraphConfig()
    solver_cfg = solver_cfg or SolverConfig()
    if mode not in ("batch", "incremental"):
        raise ValueError("mode must be 'batch' or 'incremental'")
    builder = make_builder(d, graph_cfg)
    g = PoseGraph(graph_cfg.mode)
    payloads = list(d.payloads(graph_cfg.d_near, graph_cfg.d_far))
    if not payloads:
        raise EvaluationError("empty dataset")
    reports: list[SolveReport] = []
    try:
        if mode == "batch":
            for p in payloads:
                builder.extend(g, p)
            reports.append(optimize_batch(g, solver_cfg))
            if on_step:
                on_step(g, reports[-1])
        else:
            builder.extend(g, payloads[0])
            for p in payloads[1:]:
                reports.append(optimize_incremental(g, solver_cfg, p, builder))
                if on_step:
                    on_step(g, reports[-1])
    except NumericalFailure as exc:
        return RunResult(g, reports, str(exc))
    return RunResult(g, reports)


def evaluate_run(d: Dataset, run: RunResult) -> dict[str, AteResult]:
    return score(trajectories(run.graph), ground_truth(d))


@dataclass
class ResultRow:
    config: str
    agent: str
    frames: int
    ate_rms_m: float
    error: Optional[str] = None


def _rows(config: str, results: dict[str, AteResult], error: Optional[str] = None) -> list[ResultRow]:
    return [ResultRow(config, a, len(r.frames), r.rms, error) for a, r in results.items()]


def _run_rows(
    config: str, d: Dataset, graph_cfg: GraphConfig, solver_cfg: Optional[SolverConfig], mode: str
) -> list[ResultRow]:
    run = solve_dataset(d, graph_cfg, solver_cfg, mode)
    return _rows(config, evaluate_run(d, run), run.error)


def ablate_families(
    d: Dataset,
    base_cfg: Optional[GraphConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    mode: str = "batch",
) -> list[ResultRow]:
    """Zero the weight of one edge family at a time (edges kept), plus the full graph."""
    base = base_cfg or GraphConfig()
    variants = {
        "without_CC": replace(base, w_cc=0.0),
        "without_VV": replace(base, w_vv=0.0),
        "without_CV": replace(base, cv_gain=0.0),
        "without_CP": replace(base, w_cp=0.0),
        "with_all": base,
    }
    rows: list[ResultRow] = []
    for name in FAMILY_CONFIGS:
        rows += _run_rows(name, d, variants[name], solver_cfg, mode)
    return rows


def sweep(
    d: Dataset,
    parameter: str,
    base_cfg: Optional[GraphConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    mode: str = "batch",
) -> list[ResultRow]:
    base = base_cfg or GraphConfig()
    rows: list[ResultRow] = []
    if parameter == "cp_weight":
        for label, w in CP_WEIGHTS.items():
            rows += _run_rows(f"cp_weight={label}", d, replace(base, w_cp=w), solver_cfg, mode)
    elif parameter == "depth_T":
        for t in DEPTH_THRESHOLDS:
            label = "inf" if math.isinf(t) else f"{t:g}"
            rows += _run_rows(f"depth_T={label}", d, replace(base, landmark_depth_T=t), solver_cfg, mode)
    else:
        raise ValueError("parameter must be 'cp_weight' or 'depth_T'")
    return rows


def lane_ablation(
    d: Dataset,
    base_cfg: Optional[GraphConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    mode: str = "batch",
) -> dict[str, list[ResultRow]]:
    """Optimise without (CP weight 0) and with lane constraints."""
    if not d.lanes:
        raise EvaluationError("dataset has no lane samples")
    base = base_cfg or GraphConfig()
    return {
        "before": _run_rows("before_lanes", d, replace(base, w_cp=0.0), solver_cfg, mode),
        "after": _run_rows("after_lanes", d, base, solver_cfg, mode),
    }


@dataclass
class TimingRow:
    frame: int
    objects: int
    time_s: float


def runtime_profile(
    d: Dataset,
    mode: str = "incremental",
    graph_cfg: Optional[GraphConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
) -> list[TimingRow]:
    """Wall time per incremental step (one row per frame), or one batch row.

    ``objects`` counts the vehicles detected in the frame (all frames for
    batch mode).
    """
    graph_cfg = graph_cfg or GraphConfig()
    solver_cfg = solver_cfg or SolverConfig()
    builder = make_builder(d, graph_cfg)
    payloads = list(d.payloads(graph_cfg.d_near, graph_cfg.d_far))
    g = PoseGraph(graph_cfg.mode)
    rows: list[TimingRow] = []
    if mode == "batch":
        t0 = time.perf_counter()
        for p in payloads:
            builder.extend(g, p)
        optimize_batch(g, solver_cfg)
        objects = len({t for p in payloads for t, _ in p.vehicles})
        return [TimingRow(d.frames - 1, objects, time.perf_counter() - t0)]
    if mode != "incremental":
        raise ValueError("mode must be 'batch' or 'incremental'")
    t0 = time.perf_counter()
    builder.extend(g, payloads[0])
    rows.append(TimingRow(0, len(payloads[0].vehicles), time.perf_counter() - t0))
    for p in payloads[1:]:
        t0 = time.perf_counter()
        optimize_incremental(g, solver_cfg, p, builder)
        rows.append(TimingRow(p.frame, len(p.vehicles), time.perf_counter() - t0))
    return rows


def median_step_time(rows: Sequence[TimingRow]) -> float:
    return statistics.median(r.time_s for r in rows)


# ---------------------------------------------------------------------------
# CSV output


def write_results_csv(path: Path, rows: Iterable[ResultRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r.config, r.agent, r.frames, f"{r.ate_rms_m:.17g}"])


def read_results_csv(path: Path) -> list[ResultRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != RESULT_FIELDS:
            raise EvaluationError(f"{path}: unexpected header {reader.fieldnames}")
        return [ResultRow(r["config"], r["agent"], int(r["frames"]), float(r["ate_rms_m"])) for r in reader]


def write_timing_csv(path: Path, rows: Iterable[TimingRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TIMING_FIELDS)
        for r in rows:
            w.writerow([r.frame, r.objects, f"{r.time_s:.17g}"])


def read_timing_csv(path: Path) -> list[TimingRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TIMING_FIELDS:
            raise EvaluationError(f"{path}: unexpected header {reader.fieldnames}")
        return [TimingRow(int(r["frame"]), int(r["objects"]), float(r["time_s"])) for r in reader]


def write_trajectory_csv(path: Path, traj: TrajectoryEstimate) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "x", "z", "theta"])
        for f, p in traj.poses.items():
            w.writerow([f, f"{p.x:.17g}", f"{p.z:.17g}", f"{p.theta:.17g}"])


def read_trajectory_csv(path: Path, agent: str) -> TrajectoryEstimate:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame", "x", "z", "theta"]:
            raise EvaluationError(f"{path}: unexpected header {reader.fieldnames}")
        return TrajectoryEstimate(agent, {int(r["frame"]): Pose2(float(r["x"]), float(r["z"]), float(r["theta"])) for r in reader})
