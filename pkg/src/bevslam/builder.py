"""Wiring per-frame measurements into the pose graph.

One code path serves both batch construction (new nodes initialised by dead
reckoning over the unoptimised estimates) and incremental solving (new nodes
initialised from the latest optimised estimates). Default weights:
CC 10000, CP 10000, VV 1, CV 10..1000 by depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .geometry import Pose, Pose2, Pose3, compose, project_to_se2, relative, rot2, wrap_angle, yaw_rotation
from .metrology import D_FAR, D_NEAR, VehicleMeasurement
from .posegraph import Edge, EdgeKind, Mode, Node, NodeKind, PoseGraph, default_information


@dataclass
class GraphConfig:
    mode: Mode = Mode.SE2
    w_cc: float = 10000.0
    w_vv: float = 1.0
    w_cp: float = 10000.0
    cv_gain: float = 1.0  # multiplies the depth-gauged CV weight; 0 removes the family
    d_near: float = D_NEAR
    d_far: float = D_FAR
    landmark_depth_T: float = 20.0
    anchor_landmarks: bool = True
    vv_history: int = 10
    max_coast: int = 3

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode)
        for name in ("w_cc", "w_vv", "w_cp", "cv_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.landmark_depth_T > 0:
            raise ValueError("landmark_depth_T must be positive")
        if self.vv_history < 1 or self.max_coast < 0:
            raise ValueError("vv_history >= 1 and max_coast >= 0 required")


@dataclass
class FramePayload:
    """Everything measured at one frame.

    ``odometry`` is the step from the previous frame (None for the first),
    ``vehicles`` holds (track, measurement) pairs and ``landmarks`` holds
    (point id, x_cam, z_cam) ground observations.
    """

    frame: int
    odometry: Optional[Pose2] = None
    vehicles: list[tuple[int, VehicleMeasurement]] = field(default_factory=list)
    landmarks: list[tuple[int, float, float]] = field(default_factory=list)


def filter_landmarks_by_depth(points: Sequence, t_max: float) -> list:
    """Keep points whose camera-frame depth z is at most ``t_max``.

    Items may be (x, y, z) ground points or (x, z) BEV points; the last
    coordinate is taken as depth.
    """
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    return [p for p in points if float(p[-1]) <= t_max]


class GraphBuilder:
    """Adds one frame of nodes and edges at a time.

    ``lane_map`` maps landmark point ids to known world (x, z) positions; with
    ``anchor_landmarks`` those landmarks enter the graph as fixed anchors.
    """

    def __init__(
        self,
        cfg: Optional[GraphConfig] = None,
        camera_height: float = 1.65,
        lane_map: Optional[Mapping[int, tuple[float, float]]] = None,
    ):
        self.cfg = cfg or GraphConfig()
        self.camera_height = float(camera_height)
        self.lane_map = dict(lane_map or {})

    # -- pose helpers --------------------------------------------------------

    def _lift(self, p: Pose2) -> Pose:
        return p if self.cfg.mode is Mode.SE2 else Pose3.from_pose2(p)

    def _planar(self, p: Pose) -> Pose2:
        return p if isinstance(p, Pose2) else project_to_se2(p)

    def _new_graph_check(self, g: PoseGraph) -> None:
        if g.mode is not self.cfg.mode:
            raise ValueError(f"graph mode {g.mode.value} != config mode {self.cfg.mode.value}")

    # -- motion model --------------------------------------------------------

    def _twist(self, g: PoseGraph, track: int, frame: int) -> Optional[Pose2]:
        """Mean planar step of ``track`` over its last few frames ending at ``frame``."""
        poses = []
        t = frame
        while len(poses) <= self.cfg.vv_history:
            nid = g.vehicle_id(track, t)
            if nid is None:
                break
            est = g.nodes[nid].estimate
            p = est if isinstance(est, Pose2) else project_to_se2(est)
            poses.append((p.x, p.z, p.theta))
            t -= 1
        if len(poses) < 2:
            return None
        # poses run newest first; average the body-frame steps between them
        sx = sz = st = 0.0
        for (bx, bz, bt), (ax, az, at) in zip(poses[:-1], poses[1:]):
            c, s = math.cos(at), math.sin(at)
            sx += c * (bx - ax) + s * (bz - az)
            sz += -s * (bx - ax) + c * (bz - az)
            st += wrap_angle(bt - at)
        k = len(poses) - 1
        return Pose2(sx / k, sz / k, st / k)

    def _coasted(self, g: PoseGraph, track: int, frame: int) -> int:
        """Number of consecutive frames up to ``frame`` without a CV edge."""
        count = 0
        t = frame
        while True:
            nid = g.vehicle_id(track, t)
            if nid is None:
                return count
            if any(g.edges[i].kind is EdgeKind.CV for i in g.incident_edges(nid)):
                return count
            count += 1
            t -= 1

    # -- frame insertion ---------------------------------------------------------

    def extend(self, g: PoseGraph, payload: FramePayload) -> list[int]:
        """Insert a frame; returns the ids of the nodes created."""
        self._new_graph_check(g)
        cfg = self.cfg
        t = payload.frame
        created: list[int] = []
        if g.camera_id(t) is not None:
            raise ValueError(f"frame {t} already in graph")

        prev_cam = g.camera_id(t - 1)
        if prev_cam is None:
            if g.frames():
                raise ValueError(f"frame {t} does not follow the last frame {g.frames()[-1]}")
            cam_est = self._lift(Pose2())
            cam_id = g.add_node(Node.camera(g.next_id(), t, cam_est, fixed=True))
        else:
            if payload.odometry is None:
                raise ValueError(f"frame {t} needs an odometry step")
            step = self._lift(payload.odometry)
            cam_est = compose(g.nodes[prev_cam].estimate, step)
            cam_id = g.add_node(Node.camera(g.next_id(), t, cam_est))
            g.add_edge(Edge(EdgeKind.CC, prev_cam, cam_id, step, default_information(EdgeKind.CC, cfg.mode), cfg.w_cc))
        created.append(cam_id)
        cam_planar = self._planar(cam_est)

        # observed tracks plus tracks coasting through a short dropout, in
        # track order so each frame's poses stay contiguous in the graph
        arrivals: dict[int, Optional[VehicleMeasurement]] = dict(payload.vehicles)
        if len(arrivals) != len(payload.vehicles):
            raise ValueError(f"frame {t} lists a vehicle track twice")
        for track in g.tracks():
            if track in arrivals or g.vehicle_id(track, t - 1) is None:
                continue
            if self._coasted(g, track, t - 1) < cfg.max_coast:
                arrivals[track] = None
        for track in sorted(arrivals):
            created.append(self._add_vehicle(g, track, t, cam_id, cam_planar, arrivals[track]))

        kept = filter_landmarks_by_depth(payload.landmarks, cfg.landmark_depth_T)
        heading = self._lane_heading(kept)
        if heading is None:
            heading = cam_planar.theta
        for pid, xc, zc in kept:
            created.extend(self._add_landmark_obs(g, cam_id, cam_planar, heading, int(pid), float(xc), float(zc)))
        return created

    def _lane_heading(self, observations: Sequence[tuple[int, float, float]]) -> Optional[float]:
        """Camera heading from anchored road points seen in this frame.

        A 2D Procrustes fit of the camera-frame observations onto their map
        positions; None when fewer than two anchors are visible or the
        points are degenerate.
        """
        if not self.cfg.anchor_landmarks:
            return None
        pairs = [(o[1], o[2], *self.lane_map[int(o[0])]) for o in observations if int(o[0]) in self.lane_map]
        if len(pairs) < 2:
            return None
        arr = np.array(pairs, dtype=float)
        a = arr[:, :2] - arr[:, :2].mean(axis=0)
        b = arr[:, 2:] - arr[:, 2:].mean(axis=0)
        cross = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
        dot = float(np.sum(a * b))
        if math.hypot(cross, dot) < 1e-9:
            return None
        return math.atan2(cross, dot)

    def _add_vehicle(
        self, g: PoseGraph, track: int, t: int, cam_id: int, cam_planar: Pose2,
        meas: Optional[VehicleMeasurement],
    ) -> int:
        cfg = self.cfg
        prev = g.vehicle_id(track, t - 1)
        twist = self._twist(g, track, t - 1) if prev is not None else None
        predicted = None
        if prev is not None and twist is not None:
            predicted = compose(self._planar(g.nodes[prev].estimate), twist)
        if meas is not None:
            yaw_fallback = relative(cam_planar, predicted).theta if predicted is not None else 0.0
            cv_pose = meas.as_pose(yaw_fallback)
            est = compose(cam_planar, cv_pose)
        else:
            est = predicted if predicted is not None else self._planar(g.nodes[prev].estimate)
        vid = g.add_node(Node.vehicle(g.next_id(), track, t, self._lift(est)))
        if prev is not None:
            vv = twist if twist is not None else relative(self._planar(g.nodes[prev].estimate), est)
            g.add_edge(Edge(EdgeKind.VV, prev, vid, self._lift(vv), default_information(EdgeKind.VV, cfg.mode), cfg.w_vv))
        if meas is not None:
            info = default_information(EdgeKind.CV, cfg.mode, yaw_known=meas.yaw is not None)
            g.add_edge(Edge(EdgeKind.CV, cam_id, vid, self._lift(cv_pose), info, cfg.cv_gain * meas.weight))
        return vid

    def _add_landmark_obs(
        self, g: PoseGraph, cam_id: int, cam_planar: Pose2, heading: float, pid: int, xc: float, zc: float
    ) -> list[int]:
        """CP edge camera -> landmark; the offset is the observation rotated into world axes."""
        cfg = self.cfg
        created = []
        offset2 = -(rot2(heading) @ np.array([xc, zc]))
        lid = g.landmark_id(pid)
        if lid is None:
            anchored = cfg.anchor_landmarks and pid in self.lane_map
            world = np.asarray(self.lane_map[pid], dtype=float) if anchored else cam_planar.translation - offset2
            pos = world if cfg.mode is Mode.SE2 else np.array([world[0], self.camera_height, world[1]])
            lid = g.add_node(Node.landmark(g.next_id(), pid, pos, fixed=anchored))
            created.append(lid)
        if cfg.mode is Mode.SE2:
            offset = offset2
        else:
            offset = -(yaw_rotation(heading) @ np.array([xc, self.camera_height, zc]))
        g.add_edge(Edge(EdgeKind.CP, cam_id, lid, offset, default_information(EdgeKind.CP, cfg.mode), cfg.w_cp))
        return created
