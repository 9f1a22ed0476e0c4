import math

import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from bevslam.geometry import Pose2, Pose3, so3_exp

settings.register_profile("default", deadline=None)
settings.load_profile("default")

# one verdict line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])

coord = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)
angle = st.floats(-math.pi, math.pi, allow_nan=False, allow_infinity=False)


@st.composite
def pose2s(draw):
    return Pose2(draw(coord), draw(coord), draw(angle))


@st.composite
def pose3s(draw):
    w = np.array([draw(st.floats(-2.0, 2.0)) for _ in range(3)])
    t = np.array([draw(coord) for _ in range(3)])
    return Pose3(so3_exp(w), t)


def random_pose2(rng: np.random.Generator, span: float = 20.0) -> Pose2:
    return Pose2(*rng.uniform(-span, span, 2), rng.uniform(-math.pi, math.pi))


def random_pose3(rng: np.random.Generator, span: float = 20.0) -> Pose3:
    return Pose3(so3_exp(rng.normal(size=3)), rng.uniform(-span, span, 3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_graph(rng: np.random.Generator, mode: str = "SE2", consistent: bool = False,
                 frames: int = 4, tracks: int = 2, landmarks: int = 3, random_info: bool = True):
    """A small graph with every edge family; measurements either random or
    generated from the estimates (zero residual)."""
    from bevslam.geometry import relative
    from bevslam.posegraph import Edge, EdgeKind, Mode, Node, PoseGraph, default_information

    mode = Mode(mode)
    g = PoseGraph(mode)
    pose = random_pose2 if mode is Mode.SE2 else random_pose3
    pd = mode.point_dim

    def info(kind):
        if kind is EdgeKind.CP or not random_info:
            return default_information(kind, mode)
        a = rng.normal(size=(mode.dim, mode.dim))
        return a @ a.T + 0.1 * np.eye(mode.dim)

    def meas_binary(s, d):
        return relative(g.nodes[s].estimate, g.nodes[d].estimate) if consistent else pose(rng, 2.0)

    nid = 0
    cams, vehs, lms = [], {}, []
    for f in range(frames):
        g.add_node(Node.camera(nid, f, pose(rng), fixed=(f == 0)))
        cams.append(nid)
        nid += 1
        for j in range(tracks):
            g.add_node(Node.vehicle(nid, j, f, pose(rng)))
            vehs[j, f] = nid
            nid += 1
    for p in range(landmarks):
        g.add_node(Node.landmark(nid, p, rng.uniform(-20, 20, pd)))
        lms.append(nid)
        nid += 1
    for f in range(1, frames):
        g.add_edge(Edge(EdgeKind.CC, cams[f - 1], cams[f], meas_binary(cams[f - 1], cams[f]), info(EdgeKind.CC), 1e4))
        for j in range(tracks):
            s, d = vehs[j, f - 1], vehs[j, f]
            g.add_edge(Edge(EdgeKind.VV, s, d, meas_binary(s, d), info(EdgeKind.VV), 1.0))
    for f in range(frames):
        for j in range(tracks):
            s, d = cams[f], vehs[j, f]
            g.add_edge(Edge(EdgeKind.CV, s, d, meas_binary(s, d), info(EdgeKind.CV), float(rng.uniform(10, 1000))))
    agents = cams + list(vehs.values())
    for k, lid in enumerate(lms):
        for a in (agents[k % len(agents)], agents[(3 * k + 1) % len(agents)]):
            if consistent:
                off = g.nodes[a].translation() - g.nodes[lid].estimate
            else:
                off = rng.normal(size=pd)
            g.add_edge(Edge(EdgeKind.CP, a, lid, off, info(EdgeKind.CP), 1e4))
    return g
