"""Typed multibody pose graph and its cost function.

Nodes are camera poses, vehicle poses and static road landmarks. Edges come
in four families:

* ``CC``  camera(t-1) -> camera(t), odometry
* ``VV``  vehicle(j, t-1) -> vehicle(j, t), motion model
* ``CV``  camera(t) -> vehicle(j, t), detection
* ``CP``  agent -> landmark, translation-only (never constrains orientation)

Binary edges use the error of ``M^-1 (T_S^W)^-1 T_D^W``; CP edges use
``t_A - X_p - offset`` with zero-padded rotation rows. Every edge cost is
``e^T (lambda * Omega) e``.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Union

import numpy as np

from .geometry import (
    Pose,
    Pose2,
    Pose3,
    error_from_transform,
    inverse,
    compose,
)

PSD_TOL = 1e-9


class Mode(str, Enum):
    SE2 = "SE2"
    SE3 = "SE3"

    @property
    def dim(self) -> int:
        return 3 if self is Mode.SE2 else 6

    @property
    def point_dim(self) -> int:
        return 2 if self is Mode.SE2 else 3


class NodeKind(str, Enum):
    CAMERA = "C"
    VEHICLE = "V"
    LANDMARK = "L"


class EdgeKind(str, Enum):
    CC = "CC"
    VV = "VV"
    CV = "CV"
    CP = "CP"

    @property
    def is_dynamic(self) -> bool:
        return self is not EdgeKind.CP


class GraphError(ValueError):
    pass


class DuplicateNodeError(GraphError):
    pass


class MissingNodeError(GraphError):
    pass


class EdgeKindError(GraphError):
    pass


class InformationMatrixError(GraphError):
    pass


class GraphParseError(GraphError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


Estimate = Union[Pose2, Pose3, np.ndarray]


@dataclass
class Node:
    """A graph variable.

    ``index`` is the frame for camera/vehicle nodes and the point index for
    landmarks; ``track`` is set for vehicles only.
    """

    id: int
    kind: NodeKind
    estimate: Estimate
    index: int = 0
    track: Optional[int] = None
    fixed: bool = False

    @classmethod
    def camera(cls, id: int, frame: int, estimate: Pose, fixed: bool = False) -> "Node":
        return cls(id, NodeKind.CAMERA, estimate, frame, None, fixed)

    @classmethod
    def vehicle(cls, id: int, track: int, frame: int, estimate: Pose, fixed: bool = False) -> "Node":
        return cls(id, NodeKind.VEHICLE, estimate, frame, track, fixed)

    @classmethod
    def landmark(cls, id: int, point: int, position, fixed: bool = False) -> "Node":
        return cls(id, NodeKind.LANDMARK, np.array(position, dtype=float), point, None, fixed)

    @property
    def frame(self) -> Optional[int]:
        return None if self.kind is NodeKind.LANDMARK else self.index

    @property
    def is_pose(self) -> bool:
        return self.kind is not NodeKind.LANDMARK

    def translation(self) -> np.ndarray:
        if isinstance(self.estimate, np.ndarray):
            return self.estimate
        return self.estimate.translation


@dataclass
class Edge:
    """A constraint; ``measurement`` is a pose (binary) or offset vector (CP)."""

    kind: EdgeKind
    source: int
    dest: int
    measurement: Estimate
    information: np.ndarray
    scale: float = 1.0

    @property
    def effective_information(self) -> np.ndarray:
        return self.scale * self.information


def default_information(kind: EdgeKind, mode: Mode, yaw_known: bool = True) -> np.ndarray:
    """Identity, with zero rows for the rotation components an edge cannot see."""
    info = np.eye(mode.dim)
    if kind is EdgeKind.CP:
        info[mode.point_dim:, mode.point_dim:] = 0.0
    elif kind is EdgeKind.CV and not yaw_known:
        rot = slice(2, 3) if mode is Mode.SE2 else slice(3, 6)
        info[rot, rot] = 0.0
    return info


_PSD_OK: set = set()


def _check_psd(m: np.ndarray, n: int) -> None:
    key = m.tobytes()
    if m.shape == (n, n) and key in _PSD_OK:
        return
    if m.shape != (n, n):
        raise InformationMatrixError(f"information must be {n}x{n}, got {m.shape}")
    if not np.allclose(m, m.T, atol=PSD_TOL, rtol=0.0):
        raise InformationMatrixError("information matrix is not symmetric")
    if np.linalg.eigvalsh(0.5 * (m + m.T)).min() < -PSD_TOL:
        raise InformationMatrixError("information matrix is not positive semidefinite")
    if len(_PSD_OK) < 256:  # the default matrices repeat; remember a few
        _PSD_OK.add(key)


class CostBreakdown(NamedTuple):
    total: float
    dynamic: float
    static: float


class PoseGraph:
    def __init__(self, mode: Union[Mode, str] = Mode.SE2):
        self.mode = Mode(mode)
        self.nodes: dict[int, Node] = {}
        self.edges: list[Edge] = []
        self._incident: dict[int, list[int]] = {}
        self._keys: dict[tuple, int] = {}
        self._frames: list[int] = []
        self._max_id = -1
        self._tracks: set[int] = set()
        self._poses_at: dict[int, list[int]] = {}

    # -- construction -----------------------------------------------------

    def add_node(self, node: Node) -> int:
        if node.id in self.nodes:
            raise DuplicateNodeError(f"node id {node.id} already present")
        self._check_estimate(node)
        key = self._key(node)
        if key in self._keys:
            raise DuplicateNodeError(f"{key} already present as node {self._keys[key]}")
        self.nodes[node.id] = node
        self._incident[node.id] = []
        self._keys[key] = node.id
        self._max_id = max(self._max_id, node.id)
        if node.kind is NodeKind.CAMERA:
            bisect.insort(self._frames, node.index)
        elif node.kind is NodeKind.VEHICLE:
            self._tracks.add(node.track)
        if node.is_pose:
            self._poses_at.setdefault(node.index, []).append(node.id)
        return node.id

    def next_id(self) -> int:
        return self._max_id + 1

    def add_edge(self, edge: Edge) -> None:
        for nid in (edge.source, edge.dest):
            if nid not in self.nodes:
                raise MissingNodeError(f"edge endpoint {nid} does not exist")
        self._check_kind(edge)
        info = np.array(edge.information, dtype=float)
        _check_psd(info, self.mode.dim)
        if not (math.isfinite(edge.scale) and edge.scale >= 0):
            raise GraphError(f"edge scale must be finite and >= 0, got {edge.scale}")
        edge.information = info
        self._check_measurement(edge)
        self.edges.append(edge)
        idx = len(self.edges) - 1
        self._incident[edge.source].append(idx)
        if edge.dest != edge.source:
            self._incident[edge.dest].append(idx)

    # -- lookup -------------------------------------------------------------

    def node(self, nid: int) -> Node:
        return self.nodes[nid]

    def camera_id(self, frame: int) -> Optional[int]:
        return self._keys.get((NodeKind.CAMERA, frame))

    def vehicle_id(self, track: int, frame: int) -> Optional[int]:
        return self._keys.get((NodeKind.VEHICLE, track, frame))

    def landmark_id(self, point: int) -> Optional[int]:
        return self._keys.get((NodeKind.LANDMARK, point))

    def incident_edges(self, nid: int) -> list[int]:
        return self._incident[nid]

    def fixed_ids(self) -> list[int]:
        return [n.id for n in self.nodes.values() if n.fixed]

    def edges_of_kind(self, kind: EdgeKind) -> Iterator[Edge]:
        return (e for e in self.edges if e.kind is kind)

    def poses_at(self, frame: int) -> list[int]:
        """Camera and vehicle node ids of one frame."""
        return list(self._poses_at.get(frame, ()))

    def tracks(self) -> list[int]:
        return sorted(self._tracks)

    def frames(self) -> list[int]:
        return list(self._frames)

    def copy(self) -> "PoseGraph":
        return loads(dumps(self))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoseGraph):
            return NotImplemented
        if self.mode is not other.mode or list(self.nodes) != list(other.nodes):
            return False
        for a, b in zip(self.nodes.values(), other.nodes.values()):
            if (a.id, a.kind, a.index, a.track, a.fixed) != (b.id, b.kind, b.index, b.track, b.fixed):
                return False
            if not _estimates_equal(a.estimate, b.estimate):
                return False
        if len(self.edges) != len(other.edges):
            return False
        for a, b in zip(self.edges, other.edges):
            if (a.kind, a.source, a.dest, a.scale) != (b.kind, b.source, b.dest, b.scale):
                return False
            if not _estimates_equal(a.measurement, b.measurement):
                return False
            if not np.array_equal(a.information, b.information):
                return False
        return True

    # -- validation ---------------------------------------------------------

    @staticmethod
    def _key(node: Node) -> tuple:
        if node.kind is NodeKind.VEHICLE:
            if node.track is None:
                raise GraphError("vehicle node needs a track id")
            return (node.kind, node.track, node.index)
        return (node.kind, node.index)

    def _check_estimate(self, node: Node) -> None:
        pose_type = Pose2 if self.mode is Mode.SE2 else Pose3
        if node.is_pose:
            if not isinstance(node.estimate, pose_type):
                raise GraphError(f"node {node.id}: expected {pose_type.__name__} estimate")
        else:
            est = np.asarray(node.estimate, dtype=float)
            if est.shape != (self.mode.point_dim,):
                raise GraphError(f"landmark {node.id}: expected {self.mode.point_dim}-vector")
            node.estimate = est

    def _check_kind(self, edge: Edge) -> None:
        s, d = self.nodes[edge.source], self.nodes[edge.dest]
        C, V, L = NodeKind.CAMERA, NodeKind.VEHICLE, NodeKind.LANDMARK
        ok = False
        if edge.kind is EdgeKind.CC:
            ok = s.kind is C and d.kind is C and d.index == s.index + 1
        elif edge.kind is EdgeKind.VV:
            ok = s.kind is V and d.kind is V and s.track == d.track and d.index == s.index + 1
        elif edge.kind is EdgeKind.CV:
            ok = s.kind is C and d.kind is V and s.index == d.index
        elif edge.kind is EdgeKind.CP:
            ok = s.kind in (C, V) and d.kind is L
        if not ok:
            raise EdgeKindError(
                f"{edge.kind.value} edge cannot join {s.kind.name}({s.index}) and {d.kind.name}({d.index})"
            )

    def _check_measurement(self, edge: Edge) -> None:
        if edge.kind is EdgeKind.CP:
            m = np.asarray(edge.measurement, dtype=float)
            if m.shape != (self.mode.point_dim,):
                raise GraphError(f"CP offset must be a {self.mode.point_dim}-vector")
            edge.measurement = m
        else:
            pose_type = Pose2 if self.mode is Mode.SE2 else Pose3
            if not isinstance(edge.measurement, pose_type):
                raise GraphError(f"binary measurement must be {pose_type.__name__}")


def _estimates_equal(a: Estimate, b: Estimate) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return isinstance(a, np.ndarray) and isinstance(b, np.ndarray) and np.array_equal(a, b)
    return type(a) is type(b) and a == b


# ---------------------------------------------------------------------------
# residuals and costs


def binary_residual(edge: Edge, g: PoseGraph) -> np.ndarray:
    if edge.kind is EdgeKind.CP:
        raise EdgeKindError("binary_residual called on a CP edge")
    src = g.nodes[edge.source].estimate
    dst = g.nodes[edge.dest].estimate
    u = compose(inverse(edge.measurement), compose(inverse(src), dst))
    return error_from_transform(u)


def unary_residual(edge: Edge, g: PoseGraph) -> np.ndarray:
    if edge.kind is not EdgeKind.CP:
        raise EdgeKindError("unary_residual needs a CP edge")
    agent = g.nodes[edge.source].translation()
    point = g.nodes[edge.dest].estimate
    e = np.zeros(g.mode.dim)
    e[: g.mode.point_dim] = agent - point - edge.measurement
    return e


def residual(edge: Edge, g: PoseGraph) -> np.ndarray:
    return unary_residual(edge, g) if edge.kind is EdgeKind.CP else binary_residual(edge, g)


def edge_cost(edge: Edge, g: PoseGraph) -> float:
    e = residual(edge, g)
    return float(e @ edge.effective_information @ e)


def total_cost(g: PoseGraph) -> CostBreakdown:
    dynamic = 0.0
    static = 0.0
    for edge in g.edges:
        c = edge_cost(edge, g)
        if edge.kind.is_dynamic:
            dynamic += c
        else:
            static += c
    return CostBreakdown(dynamic + static, dynamic, static)


# ---------------------------------------------------------------------------
# text format


def _f(v: float) -> str:
    return f"{float(v):.17g}"


def _pose_fields(p: Estimate, mode: Mode) -> list[str]:
    if mode is Mode.SE2:
        if isinstance(p, np.ndarray):
            return [_f(p[0]), _f(p[1]), _f(0.0)]
        return [_f(p.x), _f(p.z), _f(p.theta)]
    if isinstance(p, np.ndarray):
        r, t = np.eye(3), p
    else:
        r, t = p.rotation, p.translation
    vals = []
    for i in range(3):
        vals.extend([r[i, 0], r[i, 1], r[i, 2], t[i]])
    return [_f(v) for v in vals]


def _upper(m: np.ndarray) -> list[str]:
    iu = np.triu_indices(m.shape[0])
    return [_f(v) for v in m[iu]]


def dumps(g: PoseGraph) -> str:
    lines = ["# bevslam pose graph", f"MODE {g.mode.value}"]
    tag = f"NODE_{g.mode.value}"
    for n in g.nodes.values():
        fields = [tag, str(n.id), *_pose_fields(n.estimate, g.mode), n.kind.value, str(n.index)]
        if n.kind is NodeKind.VEHICLE:
            fields.append(str(n.track))
        if n.fixed:
            fields.append("FIXED")
        lines.append(" ".join(fields))
    for e in g.edges:
        fields = ["EDGE", e.kind.value, str(e.source), str(e.dest)]
        if e.kind is EdgeKind.CP:
            m = e.measurement
            fields += [_f(m[0]), _f(m[1])] if g.mode is Mode.SE2 else [_f(m[0]), _f(m[2]), _f(m[1])]
        else:
            fields += _pose_fields(e.measurement, g.mode)
        fields.append(_f(e.scale))
        fields += _upper(e.information)
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def _parse_pose(vals: list[float], mode: Mode) -> Pose:
    if mode is Mode.SE2:
        return Pose2(*vals)
    m = np.array(vals).reshape(3, 4)
    return Pose3(m[:, :3], m[:, 3])


def _from_upper(vals: list[float], n: int) -> np.ndarray:
    m = np.zeros((n, n))
    iu = np.triu_indices(n)
    m[iu] = vals
    return m + np.triu(m, 1).T


def loads(text: str) -> PoseGraph:
    g: Optional[PoseGraph] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        try:
            if tok[0] == "MODE":
                if g is not None or len(tok) != 2:
                    raise GraphParseError(lineno, "MODE must appear once, first")
                g = PoseGraph(Mode(tok[1]))
                continue
            if g is None:
                raise GraphParseError(lineno, "missing MODE header")
            npose = 3 if g.mode is Mode.SE2 else 12
            nomega = g.mode.dim * (g.mode.dim + 1) // 2
            if tok[0] in ("NODE_SE2", "NODE_SE3"):
                if tok[0] != f"NODE_{g.mode.value}":
                    raise GraphParseError(lineno, f"{tok[0]} in {g.mode.value} graph")
                nid = int(tok[1])
                vals = [float(v) for v in tok[2: 2 + npose]]
                rest = tok[2 + npose:]
                kind = NodeKind(rest[0])
                index = int(rest[1])
                extra = rest[2:]
                track = None
                if kind is NodeKind.VEHICLE:
                    track = int(extra[0])
                    extra = extra[1:]
                fixed = extra == ["FIXED"]
                if extra and not fixed:
                    raise GraphParseError(lineno, f"unexpected trailing fields {extra}")
                if kind is NodeKind.LANDMARK:
                    est: Estimate = (
                        np.array(vals[:2]) if g.mode is Mode.SE2 else np.array(vals).reshape(3, 4)[:, 3].copy()
                    )
                else:
                    est = _parse_pose(vals, g.mode)
                g.add_node(Node(nid, kind, est, index, track, fixed))
            elif tok[0] == "EDGE":
                kind = EdgeKind(tok[1])
                src, dst = int(tok[2]), int(tok[3])
                rest = [float(v) for v in tok[4:]]
                if kind is EdgeKind.CP:
                    k = g.mode.point_dim
                    if g.mode is Mode.SE2:
                        meas: Estimate = np.array(rest[:2])
                    else:
                        meas = np.array([rest[0], rest[2], rest[1]])
                else:
                    k = npose
                    meas = _parse_pose(rest[:k], g.mode)
                tail = rest[k:]
                if len(tail) != 1 + nomega:
                    raise GraphParseError(lineno, f"expected {1 + nomega} weight fields, got {len(tail)}")
                info = _from_upper(tail[1:], g.mode.dim)
                g.add_edge(Edge(kind, src, dst, meas, info, tail[0]))
            else:
                raise GraphParseError(lineno, f"unknown record tag {tok[0]!r}")
        except GraphParseError:
            raise
        except (ValueError, IndexError) as exc:
            raise GraphParseError(lineno, str(exc)) from exc
    if g is None:
        raise GraphParseError(0, "empty graph text (no MODE header)")
    return g


def save(g: PoseGraph, path: Path) -> None:
    Path(path).write_text(dumps(g))


def load(path: Path) -> PoseGraph:
    return loads(Path(path).read_text())
