"""Levenberg-Marquardt on the pose-graph manifold.

Residuals and Jacobians are evaluated per edge family in vectorised form
(right perturbation, ``X <- X exp(delta)``). The damped normal equations
``(H + mu I) delta = -b`` are assembled sparsely and factorised with SuperLU
in node-id order. The incremental solver freezes everything older than a
sliding window and only compiles the edges that touch active variables.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solveh_banded
from scipy.sparse.linalg import splu

from .builder import FramePayload, GraphBuilder, filter_landmarks_by_depth  # noqa: F401 (re-export)
from .geometry import Pose2, Pose3, so3_log, wrap_angles
from .posegraph import CostBreakdown, EdgeKind, Mode, NodeKind, PoseGraph

FD_STEP = 1e-6
MIN_DAMPING = 1e-9
BANDED_MAX_WIDTH = 96  # widest band solved with the banded Cholesky


class GaugeError(ValueError):
    """No node is fixed, so the problem has a free global transform."""


class NumericalFailure(RuntimeError):
    """The damped system stayed singular for too many attempts."""


@dataclass
class SolverConfig:
    max_iterations: int = 50
    incremental_iterations: int = 5
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    cost_tol: float = 1e-9
    step_tol: float = 1e-10
    incremental_window: int = 10
    max_damping_increases: int = 10
    jacobian: str = "analytic"  # or "numeric"

    def __post_init__(self) -> None:
        if self.jacobian not in ("analytic", "numeric"):
            raise ValueError("jacobian must be 'analytic' or 'numeric'")
        if self.damping_init <= 0 or self.damping_up <= 1 or not 0 < self.damping_down < 1:
            raise ValueError("invalid damping schedule")
        if self.max_iterations < 0 or self.incremental_iterations < 0 or self.incremental_window < 2:
            raise ValueError("iteration counts must be >= 0 and window >= 2")


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    step_norm: float
    accepted: bool
    time_s: float


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    reason: str
    history: list[IterationRecord] = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def per_step_times(self) -> list[float]:
        return [r.time_s for r in self.history]

    def to_csv(self) -> str:
        lines = ["iteration,cost,step_norm,accepted,time_s"]
        for r in self.history:
            lines.append(f"{r.iteration},{r.cost:.17g},{r.step_norm:.17g},{int(r.accepted)},{r.time_s:.6f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# batched Lie-group kernels


def _hat_batch(w: np.ndarray) -> np.ndarray:
    k = np.zeros(w.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -w[..., 2], w[..., 1]
    k[..., 1, 0], k[..., 1, 2] = w[..., 2], -w[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -w[..., 1], w[..., 0]
    return k


def _so3_exp_batch(w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and left Jacobian V for each row of ``w``."""
    th = np.linalg.norm(w, axis=-1)
    small = th < 1e-6
    ts = np.where(small, 1.0, th)
    a = np.where(small, 1.0 - th**2 / 6.0, np.sin(ts) / ts)
    b = np.where(small, 0.5 - th**2 / 24.0, (1.0 - np.cos(ts)) / ts**2)
    c = np.where(small, 1.0 / 6.0 - th**2 / 120.0, (ts - np.sin(ts)) / ts**3)
    k = _hat_batch(w)
    kk = k @ k
    eye = np.eye(3)
    r = eye + a[:, None, None] * k + b[:, None, None] * kk
    v = eye + b[:, None, None] * k + c[:, None, None] * kk
    return r, v


def _so3_log_batch(r: np.ndarray) -> np.ndarray:
    cos_t = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    vee = 0.5 * np.stack([r[:, 2, 1] - r[:, 1, 2], r[:, 0, 2] - r[:, 2, 0], r[:, 1, 0] - r[:, 0, 1]], axis=-1)
    sin_t = np.linalg.norm(vee, axis=-1)
    th = np.arctan2(sin_t, cos_t)
    small = th < 1e-6
    factor = np.where(small, 1.0 + th**2 / 6.0, th / np.where(small, 1.0, sin_t))
    out = vee * factor[:, None]
    for i in np.flatnonzero(math.pi - th < 1e-4):
        out[i] = so3_log(r[i])
    return out


def _jr_inv_batch(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w, axis=-1)
    small = th < 1e-6
    ts = np.where(small, 1.0, th)
    coeff = np.where(small, 1.0 / 12.0 + th**2 / 720.0, 1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)))
    k = _hat_batch(w)
    return np.eye(3) + 0.5 * k + coeff[:, None, None] * (k @ k)


def _rot2_batch(th: np.ndarray) -> np.ndarray:
    c, s = np.cos(th), np.sin(th)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def _se2_retract(P: np.ndarray, xi: np.ndarray) -> np.ndarray:
    """Rows of ``P exp(xi)`` for planar poses stored as (x, z, theta)."""
    phi = xi[:, 2]
    small = np.abs(phi) < 1e-6
    ps = np.where(small, 1.0, phi)
    a = np.where(small, 1.0 - phi**2 / 6.0, np.sin(ps) / ps)
    b = np.where(small, phi / 2.0 - phi**3 / 24.0, (1.0 - np.cos(ps)) / ps)
    ux = a * xi[:, 0] - b * xi[:, 1]
    uz = b * xi[:, 0] + a * xi[:, 1]
    c, s = np.cos(P[:, 2]), np.sin(P[:, 2])
    return np.stack([P[:, 0] + c * ux - s * uz, P[:, 1] + s * ux + c * uz, wrap_angles(P[:, 2] + phi)], -1)


def _se3_retract(R: np.ndarray, T: np.ndarray, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    r_inc, v = _so3_exp_batch(xi[:, 3:])
    t_inc = np.einsum("nij,nj->ni", v, xi[:, :3])
    return R @ r_inc, T + np.einsum("nij,nj->ni", R, t_inc)


def _retract_rows(mode: Mode, x, xi: np.ndarray):
    if mode is Mode.SE2:
        return _se2_retract(x, xi)
    return _se3_retract(x[0], x[1], xi)


def _binary_kernel(mode: Mode, src, dst, meas, jac: bool):
    """Error of ``M^-1 S^-1 D`` per edge and, optionally, its Jacobians.

    With ``Q = S^-1 D`` and ``U = M^-1 Q`` the right-perturbation Jacobians
    are ``J_D = B`` and ``J_S = -B Ad(Q^-1)``, where ``B`` maps a tangent
    increment of ``U`` onto the error vector.
    """
    if mode is Mode.SE2:
        Ps, Pd, M = src, dst, meas
        dx = Pd[:, 0] - Ps[:, 0]
        dz = Pd[:, 1] - Ps[:, 1]
        cs, ss = np.cos(Ps[:, 2]), np.sin(Ps[:, 2])
        qx = cs * dx + ss * dz
        qz = -ss * dx + cs * dz
        qth = Pd[:, 2] - Ps[:, 2]
        ux, uz = qx - M[:, 0], qz - M[:, 1]
        cm, sm = np.cos(M[:, 2]), np.sin(M[:, 2])
        eth = wrap_angles(qth - M[:, 2])
        e = np.stack([cm * ux + sm * uz, -sm * ux + cm * uz, eth], axis=-1)
        if not jac:
            return e
        m = len(Ps)
        B = np.zeros((m, 3, 3))
        B[:, :2, :2] = _rot2_batch(eth)
        B[:, 2, 2] = 1.0
        # Ad(Q^-1) = [[R_Q^T, J R_Q^T t_Q], [0, 1]], J = [[0, -1], [1, 0]]
        cq, sq = np.cos(qth), np.sin(qth)
        w0 = cq * qx + sq * qz
        w1 = -sq * qx + cq * qz
        ad = np.zeros((m, 3, 3))
        ad[:, 0, 0], ad[:, 0, 1], ad[:, 1, 0], ad[:, 1, 1] = cq, sq, -sq, cq
        ad[:, 0, 2], ad[:, 1, 2] = -w1, w0
        ad[:, 2, 2] = 1.0
        return e, -B @ ad, B
    (Rs, Ts), (Rd, Td), (MR, Mt) = src, dst, meas
    RsT = np.transpose(Rs, (0, 2, 1))
    RQ = RsT @ Rd
    tQ = np.einsum("nij,nj->ni", RsT, Td - Ts)
    MRT = np.transpose(MR, (0, 2, 1))
    RU = MRT @ RQ
    tU = np.einsum("nij,nj->ni", MRT, tQ - Mt)
    phi = _so3_log_batch(RU)
    e = np.concatenate([tU, phi], axis=-1)
    if not jac:
        return e
    m = len(Rs)
    B = np.zeros((m, 6, 6))
    B[:, :3, :3] = RU
    B[:, 3:, 3:] = _jr_inv_batch(phi)
    # Ad(Q^-1) = [[R', [t']x R'], [0, R']] with R' = R_Q^T, t' = -R_Q^T t_Q
    RQT = np.transpose(RQ, (0, 2, 1))
    tp = -np.einsum("nij,nj->ni", RQT, tQ)
    ad = np.zeros((m, 6, 6))
    ad[:, :3, :3] = RQT
    ad[:, :3, 3:] = _hat_batch(tp) @ RQT
    ad[:, 3:, 3:] = RQT
    return e, -B @ ad, B


def _cp_kernel(mode: Mode, agent, lms: np.ndarray, off: np.ndarray, jac: bool):
    """Translation rows of the CP residual ``t_A - X_p - offset``."""
    pd, d = mode.point_dim, mode.dim
    if mode is Mode.SE2:
        ta = agent[:, :2]
    else:
        ta = agent[1]
    e = ta - lms - off
    if not jac:
        return e
    m = len(e)
    Ja = np.zeros((m, pd, d))
    Ja[:, :, :pd] = _rot2_batch(agent[:, 2]) if mode is Mode.SE2 else agent[0]
    Jl = np.broadcast_to(-np.eye(pd), (m, pd, pd)).copy()
    return e, Ja, Jl


def _angle_rows(mode: Mode, diff: np.ndarray) -> np.ndarray:
    if mode is Mode.SE2:
        diff[:, 2] = wrap_angles(diff[:, 2])
    return diff


def _binary_numeric(mode: Mode, src, dst, meas):
    """Central differences of the binary residual, h = 1e-6 per tangent axis."""
    e0 = _binary_kernel(mode, src, dst, meas, False)
    m, d = len(e0), mode.dim
    Js, Jd = np.zeros((m, d, d)), np.zeros((m, d, d))
    for k in range(d):
        xi = np.zeros((m, d))
        xi[:, k] = FD_STEP
        sp_, sm_ = _retract_rows(mode, src, xi), _retract_rows(mode, src, -xi)
        dp_, dm_ = _retract_rows(mode, dst, xi), _retract_rows(mode, dst, -xi)
        Js[:, :, k] = _angle_rows(mode, _binary_kernel(mode, sp_, dst, meas, False) - _binary_kernel(mode, sm_, dst, meas, False)) / (2 * FD_STEP)
        Jd[:, :, k] = _angle_rows(mode, _binary_kernel(mode, src, dp_, meas, False) - _binary_kernel(mode, src, dm_, meas, False)) / (2 * FD_STEP)
    return e0, Js, Jd


def _cp_numeric(mode: Mode, agent, lms: np.ndarray, off: np.ndarray):
    e0 = _cp_kernel(mode, agent, lms, off, False)
    m, d, pd = len(e0), mode.dim, mode.point_dim
    Ja, Jl = np.zeros((m, pd, d)), np.zeros((m, pd, pd))
    for k in range(d):
        xi = np.zeros((m, d))
        xi[:, k] = FD_STEP
        plus = _cp_kernel(mode, _retract_rows(mode, agent, xi), lms, off, False)
        minus = _cp_kernel(mode, _retract_rows(mode, agent, -xi), lms, off, False)
        Ja[:, :, k] = (plus - minus) / (2 * FD_STEP)
    for k in range(pd):
        h = np.zeros(pd)
        h[k] = FD_STEP
        Jl[:, :, k] = (_cp_kernel(mode, agent, lms + h, off, False) - _cp_kernel(mode, agent, lms - h, off, False)) / (2 * FD_STEP)
    return e0, Ja, Jl


# ---------------------------------------------------------------------------
# compiled problem


def _stacked_information(edges: Sequence[Edge], d: int) -> np.ndarray:
    """(n, d, d) effective information matrices, scaled in one pass."""
    if not edges:
        return np.zeros((0, d, d))
    info = np.array([e.information for e in edges])
    return info * np.array([e.scale for e in edges])[:, None, None]


class Problem:
    """A flattened view of the graph restricted to some variables and edges.

    Poses are stored as (n, 3) arrays in SE(2) or as rotation/translation
    stacks in SE(3); landmarks as (n, point_dim). ``offset`` maps each
    node to its first column in the tangent vector, -1 when held constant.
    """

    def __init__(self, g: PoseGraph, variables: Iterable[int], edges: Sequence[int]):
        self.g = g
        self.mode = g.mode
        d, pd = self.mode.dim, self.mode.point_dim
        variables = set(variables)
        edge_list = [g.edges[i] for i in edges]
        involved = sorted({e.source for e in edge_list} | {e.dest for e in edge_list} | variables)

        self.pose_ids = [i for i in involved if g.nodes[i].is_pose]
        self.lm_ids = [i for i in involved if not g.nodes[i].is_pose]
        self.pose_index = {nid: k for k, nid in enumerate(self.pose_ids)}
        self.lm_index = {nid: k for k, nid in enumerate(self.lm_ids)}

        # tangent layout follows node-id order
        self.var_ids = [i for i in involved if i in variables]
        self.pose_off = np.full(len(self.pose_ids), -1, dtype=np.int64)
        self.lm_off = np.full(len(self.lm_ids), -1, dtype=np.int64)
        col = 0
        for nid in self.var_ids:
            if g.nodes[nid].is_pose:
                self.pose_off[self.pose_index[nid]] = col
                col += d
            else:
                self.lm_off[self.lm_index[nid]] = col
                col += pd
        self.n_vars = col
        self._hess_layout: Optional[_HessianLayout] = None

        self._load_state()

        bin_edges = [e for e in edge_list if e.kind is not EdgeKind.CP]
        cp_edges = [e for e in edge_list if e.kind is EdgeKind.CP]
        self.bi_src = np.array([self.pose_index[e.source] for e in bin_edges], dtype=np.int64)
        self.bi_dst = np.array([self.pose_index[e.dest] for e in bin_edges], dtype=np.int64)
        self.bi_info = _stacked_information(bin_edges, d)
        if self.mode is Mode.SE2:
            self.bi_meas = np.array([[e.measurement.x, e.measurement.z, e.measurement.theta] for e in bin_edges]).reshape(-1, 3)
        else:
            self.bi_mR = np.array([e.measurement.rotation for e in bin_edges]).reshape(-1, 3, 3)
            self.bi_mt = np.array([e.measurement.translation for e in bin_edges]).reshape(-1, 3)
        self.cp_agent = np.array([self.pose_index[e.source] for e in cp_edges], dtype=np.int64)
        self.cp_lm = np.array([self.lm_index[e.dest] for e in cp_edges], dtype=np.int64)
        self.cp_off = np.array([e.measurement for e in cp_edges]).reshape(-1, pd)
        # rotation rows of the CP residual are identically zero, so only the
        # translation block of the information can contribute
        self.cp_info = _stacked_information(cp_edges, d)[:, :pd, :pd]

    # -- state ----------------------------------------------------------------

    def _load_state(self) -> None:
        g = self.g
        if self.mode is Mode.SE2:
            self.P = np.array([g.nodes[i].estimate.as_array() for i in self.pose_ids]).reshape(-1, 3)
        else:
            self.R = np.array([g.nodes[i].estimate.rotation for i in self.pose_ids]).reshape(-1, 3, 3)
            self.T = np.array([g.nodes[i].estimate.translation for i in self.pose_ids]).reshape(-1, 3)
        self.L = np.array([g.nodes[i].estimate for i in self.lm_ids]).reshape(-1, self.mode.point_dim)

    def get_state(self) -> tuple:
        if self.mode is Mode.SE2:
            return (self.P.copy(), self.L.copy())
        return (self.R.copy(), self.T.copy(), self.L.copy())

    def set_state(self, state: tuple) -> None:
        if self.mode is Mode.SE2:
            self.P, self.L = state[0].copy(), state[1].copy()
        else:
            self.R, self.T, self.L = state[0].copy(), state[1].copy(), state[2].copy()

    def retract(self, delta: np.ndarray) -> None:
        """Apply ``X exp(delta)`` to every variable."""
        d, pd = self.mode.dim, self.mode.point_dim
        pv = np.flatnonzero(self.pose_off >= 0)
        if pv.size:
            xi = delta[self.pose_off[pv][:, None] + np.arange(d)]
            if self.mode is Mode.SE2:
                self.P[pv] = _se2_retract(self.P[pv], xi)
            else:
                self.R[pv], self.T[pv] = _se3_retract(self.R[pv], self.T[pv], xi)
        lv = np.flatnonzero(self.lm_off >= 0)
        if lv.size:
            self.L[lv] += delta[self.lm_off[lv][:, None] + np.arange(pd)]

    def write_back(self) -> None:
        g = self.g
        rows = self.P.tolist() if self.mode is Mode.SE2 else None
        for k, nid in enumerate(self.pose_ids):
            if self.pose_off[k] < 0:
                continue
            if rows is not None:
                g.nodes[nid].estimate = Pose2(*rows[k])
            else:
                # re-orthonormalise to keep the validated rotation type happy
                u, _, vt = np.linalg.svd(self.R[k])
                g.nodes[nid].estimate = Pose3(u @ vt, self.T[k])
        for k, nid in enumerate(self.lm_ids):
            if self.lm_off[k] >= 0:
                g.nodes[nid].estimate = self.L[k].copy()

    # -- residuals ------------------------------------------------------------

    def _endpoints(self, idx: np.ndarray):
        if self.mode is Mode.SE2:
            return self.P[idx]
        return (self.R[idx], self.T[idx])

    def _binary_meas(self):
        return self.bi_meas if self.mode is Mode.SE2 else (self.bi_mR, self.bi_mt)

    def residuals(self) -> tuple[np.ndarray, np.ndarray]:
        eb = _binary_kernel(self.mode, self._endpoints(self.bi_src), self._endpoints(self.bi_dst), self._binary_meas(), False)
        ec = _cp_kernel(self.mode, self._endpoints(self.cp_agent), self.L[self.cp_lm], self.cp_off, False)
        return eb, ec

    def jacobians(self, method: str = "analytic"):
        """((e_bin, J_src, J_dst), (e_cp, J_agent, J_landmark))."""
        src, dst = self._endpoints(self.bi_src), self._endpoints(self.bi_dst)
        agent, lms = self._endpoints(self.cp_agent), self.L[self.cp_lm]
        meas = self._binary_meas()
        if method == "analytic":
            return (
                _binary_kernel(self.mode, src, dst, meas, True),
                _cp_kernel(self.mode, agent, lms, self.cp_off, True),
            )
        return (
            _binary_numeric(self.mode, src, dst, meas),
            _cp_numeric(self.mode, agent, lms, self.cp_off),
        )

    # -- cost and normal equations ---------------------------------------------

    def cost(self) -> CostBreakdown:
        eb, ec = self.residuals()
        dyn = float(np.einsum("ni,nij,nj->", eb, self.bi_info, eb)) if len(eb) else 0.0
        sta = float(np.einsum("ni,nij,nj->", ec, self.cp_info, ec)) if len(ec) else 0.0
        return CostBreakdown(dyn + sta, dyn, sta)

    def _layout(self) -> "_HessianLayout":
        if self._hess_layout is None:
            d, pd = self.mode.dim, self.mode.point_dim
            os_, od = self.pose_off[self.bi_src], self.pose_off[self.bi_dst]
            oa, ol = self.pose_off[self.cp_agent], self.lm_off[self.cp_lm]
            blocks = [
                (os_, os_, d, d), (os_, od, d, d), (od, os_, d, d), (od, od, d, d),
                (oa, oa, d, d), (oa, ol, d, pd), (ol, oa, pd, d), (ol, ol, pd, pd),
            ]
            grads = [(os_, d), (od, d), (oa, d), (ol, pd)]
            self._hess_layout = _HessianLayout(self.n_vars, blocks, grads)
        return self._hess_layout

    def linear_system(self, method: str = "analytic") -> "LinearSystem":
        """Gauss-Newton system over the variables, ready for damped solves."""
        (eb, A, B), (ec, Ja, Jl) = self.jacobians(method)
        d, pd = self.mode.dim, self.mode.point_dim
        empty = np.zeros((0, d, d))
        if len(eb):
            AtW = np.transpose(A, (0, 2, 1)) @ self.bi_info
            BtW = np.transpose(B, (0, 2, 1)) @ self.bi_info
            bi = [AtW @ A, AtW @ B, BtW @ A, BtW @ B]
            bi_g = [np.einsum("nij,nj->ni", AtW, eb), np.einsum("nij,nj->ni", BtW, eb)]
        else:
            bi, bi_g = [empty] * 4, [np.zeros((0, d))] * 2
        if len(ec):
            JaW = np.transpose(Ja, (0, 2, 1)) @ self.cp_info
            JlW = np.transpose(Jl, (0, 2, 1)) @ self.cp_info
            cp = [JaW @ Ja, JaW @ Jl, JlW @ Ja, JlW @ Jl]
            cp_g = [np.einsum("nij,nj->ni", JaW, ec), np.einsum("nij,nj->ni", JlW, ec)]
        else:
            cp = [empty, np.zeros((0, d, pd)), np.zeros((0, pd, d)), np.zeros((0, pd, pd))]
            cp_g = [np.zeros((0, d)), np.zeros((0, pd))]
        return self._layout().assemble(bi + cp, bi_g + cp_g)

    def normal_equations(self, method: str = "analytic") -> tuple[sp.csc_matrix, np.ndarray]:
        system = self.linear_system(method)
        return system.matrix(), system.b


class _HessianLayout:
    """Sparsity pattern of H for a fixed variable layout.

    Block values arrive in a fixed order each iteration; duplicates are
    summed with a precomputed scatter so no sparse conversions are needed.
    """

    def __init__(self, n: int, blocks: list, grads: list):
        self.n = n
        self.masks, rows, cols = [], [], []
        for oi, oj, di, dj in blocks:
            m = (oi >= 0) & (oj >= 0)
            self.masks.append(m)
            k = int(m.sum())
            rows.append(np.broadcast_to(oi[m][:, None, None] + np.arange(di)[None, :, None], (k, di, dj)).ravel())
            cols.append(np.broadcast_to(oj[m][:, None, None] + np.arange(dj)[None, None, :], (k, di, dj)).ravel())
        r, c = np.concatenate(rows).astype(np.int64), np.concatenate(cols).astype(np.int64)
        uniq, self.scatter = np.unique(c * n + r, return_inverse=True)
        self.scatter = self.scatter.ravel()
        self.rows, self.cols = uniq % n, uniq // n
        self.indptr = np.searchsorted(self.cols, np.arange(n + 1))
        self.lower = np.flatnonzero(self.rows >= self.cols)
        self.bandwidth = int((self.rows - self.cols).max()) if uniq.size else 0
        self.grad_masks, gidx = [], []
        for off, di in grads:
            m = off >= 0
            self.grad_masks.append(m)
            gidx.append((off[m][:, None] + np.arange(di)).ravel())
        self.grad_index = np.concatenate(gidx).astype(np.int64)

    @property
    def banded(self) -> bool:
        return self.bandwidth <= max(BANDED_MAX_WIDTH, self.n // 4)

    def assemble(self, blocks: list, grads: list) -> "LinearSystem":
        vals = np.concatenate([bl[m].ravel() for bl, m in zip(blocks, self.masks)])
        data = np.bincount(self.scatter, weights=vals, minlength=self.rows.size)
        gv = np.concatenate([g[m].ravel() for g, m in zip(grads, self.grad_masks)])
        b = np.bincount(self.grad_index, weights=gv, minlength=self.n)
        return LinearSystem(self, data, b)


class LinearSystem:
    """H (in the layout's pattern) and b, solvable for any damping."""

    def __init__(self, layout: _HessianLayout, data: np.ndarray, b: np.ndarray):
        self.layout = layout
        self.data = data
        self.b = b

    def matrix(self) -> sp.csc_matrix:
        lay = self.layout
        return sp.csc_matrix((self.data, lay.rows, lay.indptr), shape=(lay.n, lay.n))

    def solve(self, mu: float) -> Optional[np.ndarray]:
        """Solve (H + mu I) x = -b; None when the system cannot be factorised.

        Sliding-window systems in frame order are narrowly banded, so a
        banded Cholesky is tried first and sparse LU handles the rest.
        """
        lay = self.layout
        x = None
        if lay.banded:
            ab = np.zeros((lay.bandwidth + 1, lay.n))
            lo = lay.lower
            ab[lay.rows[lo] - lay.cols[lo], lay.cols[lo]] = self.data[lo]
            ab[0] += mu
            try:
                x = solveh_banded(ab, -self.b, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                x = None
        if x is None:
            A = self.matrix() + mu * sp.identity(lay.n, format="csc")
            try:
                x = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A").solve(-self.b)
            except RuntimeError:
                return None
        if not np.all(np.isfinite(x)):
            return None
        return x


# ---------------------------------------------------------------------------
# public entry points


def compile_problem(g: PoseGraph, variables: Optional[Iterable[int]] = None, edges: Optional[Sequence[int]] = None) -> Problem:
    if variables is None:
        variables = [n.id for n in g.nodes.values() if not n.fixed]
    if edges is None:
        edges = range(len(g.edges))
    return Problem(g, variables, list(edges))


def _require_gauge(g: PoseGraph) -> None:
    if not any(n.fixed for n in g.nodes.values()):
        raise GaugeError("no fixed node: the graph has a free gauge")


def linearize(g: PoseGraph, jacobian: str = "analytic") -> tuple[sp.csc_matrix, np.ndarray]:
    """Gauss-Newton system (H, b) over all free nodes, in node-id order."""
    _require_gauge(g)
    return compile_problem(g).normal_equations(jacobian)


def graph_cost(g: PoseGraph) -> CostBreakdown:
    """Vectorised equivalent of :func:`posegraph.total_cost`."""
    return compile_problem(g, variables=[]).cost()


def _levenberg_marquardt(problem: Problem, cfg: SolverConfig, max_iterations: int) -> SolveReport:
    start = time.perf_counter()
    cost = problem.cost().total
    report = SolveReport(cost, cost, 0, False, "max_iterations")
    if problem.n_vars == 0 or cost == 0.0:
        report.converged, report.reason = True, "nothing to optimise"
        report.wall_time_s = time.perf_counter() - start
        return report
    mu = cfg.damping_init
    failures = 0
    rejections = 0
    system = problem.linear_system(cfg.jacobian)
    for it in range(1, max_iterations + 1):
        t0 = time.perf_counter()
        delta = system.solve(mu)
        if delta is None:
            failures += 1
            if failures >= cfg.max_damping_increases:
                problem.write_back()
                raise NumericalFailure(f"damped system singular {failures} times in a row")
            mu *= cfg.damping_up
            report.history.append(IterationRecord(it, cost, float("nan"), False, time.perf_counter() - t0))
            report.iterations = it
            continue
        failures = 0
        step = float(np.linalg.norm(delta))
        saved = problem.get_state()
        problem.retract(delta)
        new_cost = problem.cost().total
        accepted = new_cost < cost
        report.iterations = it
        if accepted:
            rel = (cost - new_cost) / cost
            cost = new_cost
            mu = max(mu * cfg.damping_down, MIN_DAMPING)
            rejections = 0
            report.history.append(IterationRecord(it, cost, step, True, time.perf_counter() - t0))
            if rel < cfg.cost_tol or step < cfg.step_tol or cost == 0.0:
                report.converged, report.reason = True, "cost" if rel < cfg.cost_tol else "step"
                break
            if it < max_iterations:
                system = problem.linear_system(cfg.jacobian)
        else:
            problem.set_state(saved)
            mu *= cfg.damping_up
            rejections += 1
            report.history.append(IterationRecord(it, cost, step, False, time.perf_counter() - t0))
            if step < cfg.step_tol:
                report.converged, report.reason = True, "step"
                break
            if rejections >= cfg.max_damping_increases:
                report.converged, report.reason = True, "no descent"
                break
    problem.write_back()
    report.final_cost = cost
    report.wall_time_s = time.perf_counter() - start
    return report


def optimize_batch(g: PoseGraph, cfg: Optional[SolverConfig] = None) -> SolveReport:
    """Optimise every free node in place."""
    cfg = cfg or SolverConfig()
    _require_gauge(g)
    return _levenberg_marquardt(compile_problem(g), cfg, cfg.max_iterations)


def active_set(g: PoseGraph, window: int) -> tuple[list[int], list[int]]:
    """Free nodes within the last ``window`` frames and the edges touching them.

    Poses older than the window and landmarks no longer seen by an active
    pose are frozen (their ``fixed`` flag is set). Freezing walks back from
    the window edge and stops at the first frame that is already frozen,
    which is the state the incremental solver leaves behind.
    """
    frames = g.frames()
    if not frames:
        return [], []
    oldest = frames[-1] - window + 1
    active_poses = [nid for f in range(oldest, frames[-1] + 1) for nid in g.poses_at(f) if not g.nodes[nid].fixed]
    edge_ids = sorted({i for nid in active_poses for i in g.incident_edges(nid)})
    touched = {g.edges[i].dest for i in edge_ids if g.edges[i].kind is EdgeKind.CP}

    leaving = []
    for f in range(oldest - 1, frames[0] - 1, -1):
        free = [nid for nid in g.poses_at(f) if not g.nodes[nid].fixed]
        if not free and g.poses_at(f):
            break
        leaving.extend(free)
    for nid in leaving:
        g.nodes[nid].fixed = True
        for i in g.incident_edges(nid):
            e = g.edges[i]
            if e.kind is EdgeKind.CP and e.dest not in touched:
                g.nodes[e.dest].fixed = True

    active_lms = sorted(lid for lid in touched if not g.nodes[lid].fixed)
    variables = sorted(active_poses + active_lms)
    edge_ids = sorted(set(edge_ids) | {i for nid in active_lms for i in g.incident_edges(nid)})
    return variables, edge_ids


def optimize_incremental(
    g: PoseGraph,
    cfg: Optional[SolverConfig],
    new_frame: FramePayload,
    builder: Optional[GraphBuilder] = None,
) -> SolveReport:
    """Insert one frame (initialised from the current optimised estimates) and
    run a few LM iterations over the sliding window."""
    cfg = cfg or SolverConfig()
    start = time.perf_counter()
    builder = builder or GraphBuilder()
    builder.extend(g, new_frame)
    _require_gauge(g)
    variables, edges = active_set(g, cfg.incremental_window)
    report = _levenberg_marquardt(Problem(g, variables, edges), cfg, cfg.incremental_iterations)
    report.wall_time_s = time.perf_counter() - start
    return report
