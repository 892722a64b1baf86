"""
Wrench-rate NMPC.

The prediction state is x = [F, M, p, v, q, ω] (19 entries) and the input is the wrench rate
u = [Ḟ, Ṁ]. Stages whose contact indicator is set carry three extra decision variables, the
ground reaction (normal force, lateral friction along body y, roll torque), and the
rolling equalities (Rᵀv)_y = 0, ω_x = 0, p_z = r.

The problem is solved by Gauss–Newton SQP over multiple-shooting states. Each QP is
condensed onto (u, contact) and handed to qpOASES through casadi's conic interface.
Quaternions are updated on the tangent space, so every QP works with 18 state increments.
"""
import logging
import time
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import casadi as ca
import numpy as np

from .core import VehicleParams, Wrench, quat_conjugate, quat_error, quat_multiply, quat_normalize
from .errors import InvalidArgumentError, SolverError
from .trajectory import ReferencePoint

logger = logging.getLogger(__name__)

NX = 19
NDX = 18
NU = 6
NL = 3
NB = NU + NL

STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max-iter"
STATUS_RELAXED = "infeasible-relaxed"

DEFAULT_Q = (0.05,) * 3 + (0.1,) * 3 + (80.0, 80.0, 120.0) + (10.0,) * 3 + (60.0,) * 3 + (5.0,) * 3
DEFAULT_Q_N = DEFAULT_Q[:6] + tuple(10.0 * w for w in DEFAULT_Q[6:15]) + DEFAULT_Q[15:]


@dataclass(frozen=True)
class NmpcConfig:
    """Horizon, weights over the 18-entry stage error, and bounds. Defaults follow the flight setup."""
    N: int = 20
    dt: float = 0.1
    Q: Tuple[float, ...] = DEFAULT_Q
    Q_N: Tuple[float, ...] = DEFAULT_Q_N
    R: Tuple[float, ...] = (2.0,) * 6
    u_max: Tuple[float, ...] = (2.0, 2.0, 2.0, 2.0, 2.0, 2.0)
    W_min: Tuple[float, ...] = (-0.2, -0.2, 0.0, -20.0, -20.0, -20.0)
    W_max: Tuple[float, ...] = (0.2, 0.2, 20.0, 20.0, 20.0, 20.0)
    omega_max: Tuple[float, ...] = (2.0, 2.0, 1.5)
    contact_tol: float = 0.02
    max_iter: int = 30
    kkt_tol: float = 1e-6
    dt_ctrl: float = 0.01
    slack_weight: float = 1e4
    merit_weight: float = 1e4
    contact_regularization: float = 1e-4
    stage0_tol: float = 1e-3
    line_search_steps: int = 12

    def __post_init__(self):
        if self.N < 2:
            raise InvalidArgumentError(f"Horizon must have at least 2 stages, got {self.N}")
        if self.dt <= 0.0 or self.dt_ctrl <= 0.0:
            raise InvalidArgumentError("Stage and control periods must be positive")
        if len(self.Q) != NDX or len(self.Q_N) != NDX or len(self.R) != NU:
            raise InvalidArgumentError("Q and Q_N need 18 weights, R needs 6")
        if min(self.Q) < 0.0 or min(self.Q_N) < 0.0:
            raise InvalidArgumentError("State weights must be nonnegative")
        if min(self.R) <= 0.0:
            raise InvalidArgumentError("Input weights must be positive")
        if len(self.u_max) != NU or min(self.u_max) <= 0.0:
            raise InvalidArgumentError("u_max needs six positive bounds")
        if any(lo > hi for lo, hi in zip(self.W_min, self.W_max)):
            raise InvalidArgumentError("W_min must not exceed W_max")
        if self.max_iter < 1:
            raise InvalidArgumentError("max_iter must be at least 1")

    @property
    def rti(self) -> bool:
        return self.max_iter == 1


@dataclass(frozen=True, eq=False)
class OcpProblem:
    x_est: np.ndarray
    refs: List[ReferencePoint]
    deltas: np.ndarray
    w_ext: np.ndarray
    cfg: NmpcConfig
    params: VehicleParams
    compact: bool = False

    @property
    def contact_intervals(self) -> np.ndarray:
        return self.deltas[:-1]

    @property
    def active_equality_stages(self) -> List[int]:
        return [k for k in range(1, self.cfg.N + 1) if self.deltas[k]]

    @property
    def n_equality_rows(self) -> int:
        return 3 * len(self.active_equality_stages)

    @property
    def n_general_rows(self) -> int:
        base = 9 * self.cfg.N
        return base + (self.n_equality_rows if self.compact else 3 * self.cfg.N)


@dataclass(frozen=True, eq=False)
class OcpSolution:
    states: np.ndarray
    inputs: np.ndarray
    contact_forces: np.ndarray
    kkt_residual: float
    iterations: int
    status: str
    cost: float = 0.0
    deltas: Optional[np.ndarray] = None
    merit_history: Tuple[float, ...] = ()
    solve_time: float = 0.0

    @property
    def first_input(self) -> np.ndarray:
        return self.inputs[0]

    @property
    def active_stages(self) -> int:
        return 0 if self.deltas is None else int(np.sum(self.deltas))


# --- Indicator and stage error ---

def contact_indicator(p_rz: float, p_z: float, r: float, tol: float = 0.02) -> int:
    """1 iff both the reference height and the height sit at the wheel radius."""
    if r <= 0.0:
        raise InvalidArgumentError(f"Wheel radius must be positive, got {r}")
    return int(abs(p_rz - r) <= tol and abs(p_z - r) <= tol)


def stage_error(x_k, ref: ReferencePoint) -> np.ndarray:
    """[F; M; p − p_r; v − v_r; vec(q ⊗ q_r⁻¹); ω − ω_r]. The wrench is penalized absolutely."""
    x_k = np.asarray(x_k, dtype=float)
    q_err = quat_error(x_k[12:16], ref.q)
    return np.concatenate((
        x_k[0:6],
        x_k[6:9] - ref.p,
        x_k[9:12] - ref.v,
        q_err[1:],
        x_k[16:19] - ref.omega,
    ))


# --- Symbolic model ---

def _quat_mul_sx(a, b):
    return ca.vertcat(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )


def _rotmat_sx(q):
    w, x, y, z = q[0], q[1], q[2], q[3]
    return ca.vertcat(
        ca.horzcat(1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)),
        ca.horzcat(2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)),
        ca.horzcat(2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)),
    )


def _conj_sx(q):
    return ca.vertcat(q[0], -q[1], -q[2], -q[3])


def _retract_sx(x, dx):
    dq = ca.vertcat(1.0, 0.5 * dx[12:15])
    q = _quat_mul_sx(x[12:16], dq)
    q = q / ca.norm_2(q)
    return ca.vertcat(x[0:12] + dx[0:12], q, x[16:19] + dx[15:18])


def _boxminus_sx(a, b):
    dq = _quat_mul_sx(_conj_sx(b[12:16]), a[12:16])
    sign = ca.if_else(dq[0] >= 0, 1.0, -1.0)
    return ca.vertcat(a[0:12] - b[0:12], 2.0 * sign * dq[1:4], a[16:19] - b[16:19])


class NmpcModel:
    """Casadi functions for one (config, vehicle) pair: discrete dynamics and stage Jacobians."""

    def __init__(self, cfg: NmpcConfig, params: VehicleParams):
        self.cfg = cfg
        self.params = params
        N = cfg.N

        x = ca.SX.sym("x", NX)
        u = ca.SX.sym("u", NU)
        lam = ca.SX.sym("lam", NL)
        w = ca.SX.sym("w", 6)
        gamma = ca.SX.sym("gamma")
        dx = ca.SX.sym("dx", NDX)
        x_next = ca.SX.sym("x_next", NX)

        J = ca.DM(np.asarray(params.J))
        J_inv = ca.DM(np.linalg.inv(params.J))
        g = ca.DM(np.asarray(params.g))
        e_x, e_y, e_z = ca.DM([1, 0, 0]), ca.DM([0, 1, 0]), ca.DM([0, 0, 1])

        def continuous(xs, us):
            F, M, v, q, om = xs[0:3], xs[3:6], xs[9:12], xs[12:16], xs[16:19]
            R = _rotmat_sx(q)
            reaction = lam[0] * e_z + lam[1] * ca.mtimes(R, e_y)
            v_dot = (ca.mtimes(R, F + (1 - gamma) * w[0:3]) + gamma * reaction) / params.m + g
            q_dot = 0.5 * _quat_mul_sx(q, ca.vertcat(0, om))
            torque = M + (1 - gamma) * w[3:6] + gamma * lam[2] * e_x - ca.cross(om, ca.mtimes(J, om))
            return ca.vertcat(us, v, v_dot, q_dot, ca.mtimes(J_inv, torque))

        h = cfg.dt
        k1 = continuous(x, u)
        k2 = continuous(x + 0.5 * h * k1, u)
        k3 = continuous(x + 0.5 * h * k2, u)
        k4 = continuous(x + h * k3, u)
        x_rk = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        x_rk = ca.vertcat(x_rk[0:12], x_rk[12:16] / ca.norm_2(x_rk[12:16]), x_rk[16:19])
        discrete = ca.Function("discrete", [x, u, lam, w, gamma], [x_rk])

        moved = discrete(_retract_sx(x, dx), u, lam, w, gamma)
        defect = _boxminus_sx(moved, x_next)
        linearization = ca.Function(
            "linearization",
            [x, dx, u, lam, w, gamma, x_next],
            [defect, ca.jacobian(defect, dx), ca.jacobian(defect, u), ca.jacobian(defect, lam)],
        )

        p_r = ca.SX.sym("p_r", 3)
        v_r = ca.SX.sym("v_r", 3)
        q_r = ca.SX.sym("q_r", 4)
        om_r = ca.SX.sym("om_r", 3)
        xr = _retract_sx(x, dx)
        q_err = _quat_mul_sx(xr[12:16], _conj_sx(q_r))
        q_sign = ca.if_else(q_err[0] >= 0, 1.0, -1.0)
        err = ca.vertcat(xr[0:6], xr[6:9] - p_r, xr[9:12] - v_r, q_sign * q_err[1:4], xr[16:19] - om_r)
        stage = ca.Function("stage", [x, dx, p_r, v_r, q_r, om_r], [err, ca.jacobian(err, dx)])

        v_body_y = ca.mtimes(_rotmat_sx(xr[12:16]).T, xr[9:12])[1]
        rolling = ca.vertcat(v_body_y, xr[16], xr[8] - params.r_wheel)
        constraint = ca.Function("rolling", [x, dx], [rolling, ca.jacobian(rolling, dx)])

        self.discrete = discrete
        self.discrete_map = discrete.map(N)
        self.linearization_map = linearization.map(N)
        self.stage_map = stage.map(N + 1)
        self.constraint_map = constraint.map(N + 1)

    @staticmethod
    def qp_solver(nz: int, nrows: int) -> ca.Function:
        # Built per solve; a reused qpOASES instance hot-starts from its last working set.
        prob = dict(h=ca.Sparsity.dense(nz, nz), a=ca.Sparsity.dense(nrows, nz))
        opts = dict(error_on_fail=False, sparse=False, printLevel="none")
        return ca.conic("qp", "qpoases", prob, opts)


@lru_cache(maxsize=8)
def nmpc_model(cfg: NmpcConfig, params: VehicleParams) -> NmpcModel:
    logger.info(f"Building NMPC model: N={cfg.N}, dt={cfg.dt}")
    return NmpcModel(cfg, params)


# --- Numeric tangent-space helpers ---

def retract(x: np.ndarray, dx: np.ndarray) -> np.ndarray:
    q = quat_normalize(quat_multiply(x[12:16], np.concatenate(([1.0], 0.5 * dx[12:15]))))
    return np.concatenate((x[0:12] + dx[0:12], q, x[16:19] + dx[15:18]))


def boxminus(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dq = quat_multiply(quat_conjugate(b[12:16]), a[12:16])
    sign = 1.0 if dq[0] >= 0.0 else -1.0
    return np.concatenate((a[0:12] - b[0:12], 2.0 * sign * dq[1:4], a[16:19] - b[16:19]))


# --- Problem construction ---

def build_ocp(
    x_est,
    traj: Sequence[ReferencePoint],
    cfg: NmpcConfig,
    params: VehicleParams,
    w_ext=None,
    compact: bool = False,
) -> OcpProblem:
    """Assemble the horizon: reference points, stage indicators and the external wrench feed."""
    x_est = np.asarray(x_est, dtype=float).reshape(-1)
    if x_est.shape != (NX,):
        raise InvalidArgumentError(f"x_est must have {NX} entries, got {x_est.shape}")
    if len(traj) < cfg.N + 1:
        raise InvalidArgumentError(f"Reference horizon has {len(traj)} points, need {cfg.N + 1}")
    if not np.all(np.isfinite(x_est)):
        raise InvalidArgumentError("x_est contains non-finite values")
    w_ext = np.zeros(6) if w_ext is None else np.asarray(w_ext, dtype=float).reshape(-1)
    if w_ext.shape != (6,) or not np.all(np.isfinite(w_ext)):
        raise InvalidArgumentError("External wrench must be a finite 6-vector")
    x_est = x_est.copy()
    x_est[12:16] = quat_normalize(x_est[12:16])

    refs = list(traj[: cfg.N + 1])
    r = params.r_wheel
    deltas = np.zeros(cfg.N + 1, dtype=int)
    deltas[0] = contact_indicator(refs[0].p[2], x_est[8], r, cfg.contact_tol)
    for k in range(1, cfg.N + 1):
        deltas[k] = contact_indicator(refs[k].p[2], refs[k].p[2], r, cfg.contact_tol)
    return OcpProblem(x_est=x_est, refs=refs, deltas=deltas, w_ext=w_ext, cfg=cfg, params=params, compact=compact)


# --- Warm start ---

def _initial_guess(problem: OcpProblem, model: NmpcModel, warm_start: Optional[OcpSolution]):
    cfg, params = problem.cfg, problem.params
    N = cfg.N
    gammas = problem.contact_intervals.astype(float)
    if warm_start is not None and warm_start.states.shape == (N + 1, NX):
        frac = min(cfg.dt_ctrl / cfg.dt, 1.0)
        states = np.empty_like(warm_start.states)
        for k in range(N + 1):
            a = warm_start.states[k]
            b = warm_start.states[min(k + 1, N)]
            blended = (1.0 - frac) * a + frac * b
            if a[12:16] @ b[12:16] < 0.0:
                blended[12:16] = (1.0 - frac) * a[12:16] - frac * b[12:16]
            blended[12:16] = quat_normalize(blended[12:16])
            states[k] = blended
        nxt_u = np.vstack((warm_start.inputs[1:], warm_start.inputs[-1:]))
        inputs = (1.0 - frac) * warm_start.inputs + frac * nxt_u
        lam = np.where(gammas[:, None] > 0, warm_start.contact_forces, 0.0)
        states[0] = problem.x_est
        return states, np.clip(inputs, -np.array(cfg.u_max), np.array(cfg.u_max)), lam

    inputs = np.zeros((N, NU))
    lam = np.zeros((N, NL))
    states = np.empty((N + 1, NX))
    states[0] = problem.x_est
    for k in range(N):
        if gammas[k]:
            lam[k, 0] = max(params.weight - states[k][2], 0.0)
        states[k + 1] = np.asarray(
            model.discrete(states[k], inputs[k], lam[k], problem.w_ext, gammas[k])
        ).reshape(-1)
    return states, inputs, lam


# --- SQP ---

@dataclass
class _Linearization:
    defects: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    errors: np.ndarray
    E: np.ndarray
    h: np.ndarray
    Hc: np.ndarray


def _reference_matrix(refs: Sequence[ReferencePoint]) -> Tuple[np.ndarray, ...]:
    P = np.column_stack([r.p for r in refs])
    V = np.column_stack([r.v for r in refs])
    Qr = np.column_stack([r.q for r in refs])
    W = np.column_stack([r.omega for r in refs])
    return P, V, Qr, W


def _linearize(problem: OcpProblem, model: NmpcModel, states, inputs, lam, refs_mat) -> _Linearization:
    N = problem.cfg.N
    gammas = problem.contact_intervals.astype(float)
    zeros_dx = np.zeros((NDX, N))
    d, A, B, C = model.linearization_map(
        states[:-1].T, zeros_dx, inputs.T, lam.T, np.tile(problem.w_ext[:, None], (1, N)), gammas[None, :], states[1:].T
    )
    e, E = model.stage_map(states.T, np.zeros((NDX, N + 1)), *refs_mat)
    h, Hc = model.constraint_map(states.T, np.zeros((NDX, N + 1)))
    return _Linearization(
        defects=np.asarray(d).T,
        A=np.asarray(A).reshape(NDX, N, NDX).transpose(1, 0, 2),
        B=np.asarray(B).reshape(NDX, N, NU).transpose(1, 0, 2),
        C=np.asarray(C).reshape(NDX, N, NL).transpose(1, 0, 2),
        errors=np.asarray(e).T,
        E=np.asarray(E).reshape(NDX, N + 1, NDX).transpose(1, 0, 2),
        h=np.asarray(h).T,
        Hc=np.asarray(Hc).reshape(3, N + 1, NDX).transpose(1, 0, 2),
    )


def _cost(problem: OcpProblem, errors: np.ndarray, inputs: np.ndarray, lam: np.ndarray) -> float:
    cfg = problem.cfg
    Q, Q_N, R = np.array(cfg.Q), np.array(cfg.Q_N), np.array(cfg.R)
    stage = float(np.sum(errors[:-1] ** 2 * Q)) + float(errors[-1] ** 2 @ Q_N)
    return stage + float(np.sum(inputs ** 2 * R)) + cfg.contact_regularization * float(np.sum(lam ** 2))


def _infeasibility(problem: OcpProblem, states, inputs, lam, defects, h) -> Tuple[float, float]:
    """(l1 sum, max) over dynamics defects, active equalities and bound violations for k >= 1."""
    cfg = problem.cfg
    W = states[1:, 0:6]
    wrench_viol = np.maximum(W - np.array(cfg.W_max), 0.0) + np.maximum(np.array(cfg.W_min) - W, 0.0)
    om = np.abs(states[1:, 16:19]) - np.array(cfg.omega_max)
    om_viol = np.maximum(om, 0.0)
    eq = np.abs(h[1:]) * problem.deltas[1:, None]
    parts = [np.abs(defects), wrench_viol, om_viol, eq]
    total = float(sum(np.sum(p) for p in parts))
    worst = float(max(np.max(p) if p.size else 0.0 for p in parts))
    return total, worst


def _condense(problem: OcpProblem, lin: _Linearization, states, inputs, lam):
    cfg = problem.cfg
    N = cfg.N
    nz = NB * N
    G = np.zeros((N + 1, NDX, nz))
    gv = np.zeros((N + 1, NDX))
    for k in range(N):
        G[k + 1] = lin.A[k] @ G[k]
        G[k + 1][:, NB * k:NB * k + NU] += lin.B[k]
        G[k + 1][:, NB * k + NU:NB * (k + 1)] += lin.C[k]
        gv[k + 1] = lin.A[k] @ gv[k] + lin.defects[k]

    Q, Q_N, R = np.array(cfg.Q), np.array(cfg.Q_N), np.array(cfg.R)
    H = np.zeros((nz, nz))
    grad = np.zeros(nz)
    for k in range(1, N + 1):
        weights = Q_N if k == N else Q
        Jk = lin.E[k] @ G[k]
        rk = lin.errors[k] + lin.E[k] @ gv[k]
        H += Jk.T @ (weights[:, None] * Jk)
        grad += Jk.T @ (weights * rk)
    for k in range(N):
        u_idx = slice(NB * k, NB * k + NU)
        l_idx = slice(NB * k + NU, NB * (k + 1))
        H[u_idx, u_idx] += np.diag(R)
        grad[u_idx] += R * inputs[k]
        H[l_idx, l_idx] += cfg.contact_regularization * np.eye(NL)
        grad[l_idx] += cfg.contact_regularization * lam[k]
    H = 0.5 * (H + H.T)

    rows, lower, upper = [], [], []
    W_min, W_max, om_max = np.array(cfg.W_min), np.array(cfg.W_max), np.array(cfg.omega_max)
    for k in range(1, N + 1):
        rows.append(G[k][0:6])
        lower.append(W_min - states[k][0:6] - gv[k][0:6])
        upper.append(W_max - states[k][0:6] - gv[k][0:6])
        rows.append(G[k][15:18])
        lower.append(-om_max - states[k][16:19] - gv[k][15:18])
        upper.append(om_max - states[k][16:19] - gv[k][15:18])
        active = bool(problem.deltas[k])
        if active or not problem.compact:
            rows.append(lin.Hc[k] @ G[k])
            target = -(lin.h[k] + lin.Hc[k] @ gv[k])
            lower.append(target if active else np.full(3, -np.inf))
            upper.append(target if active else np.full(3, np.inf))
    A = np.vstack(rows)
    lba = np.concatenate(lower)
    uba = np.concatenate(upper)

    u_max = np.array(cfg.u_max)
    lbx = np.empty(nz)
    ubx = np.empty(nz)
    gammas = problem.contact_intervals
    for k in range(N):
        lbx[NB * k:NB * k + NU] = -u_max - inputs[k]
        ubx[NB * k:NB * k + NU] = u_max - inputs[k]
        l_idx = slice(NB * k + NU, NB * (k + 1))
        if gammas[k]:
            lbx[l_idx] = np.array([-lam[k, 0], -np.inf, -np.inf])
            ubx[l_idx] = np.inf
        else:
            lbx[l_idx] = -lam[k]
            ubx[l_idx] = -lam[k]
    return G, gv, H, grad, A, lba, uba, lbx, ubx


def _solve_qp(model: NmpcModel, H, grad, A, lba, uba, lbx, ubx) -> Optional[np.ndarray]:
    solver = model.qp_solver(H.shape[0], A.shape[0])
    sol = solver(h=H, g=grad, a=A, lba=lba, uba=uba, lbx=lbx, ubx=ubx)
    if not solver.stats()["success"]:
        return None
    return np.asarray(sol["x"]).reshape(-1)


def _solve_relaxed_qp(model: NmpcModel, H, grad, A, lba, uba, lbx, ubx, weight: float) -> Optional[np.ndarray]:
    """l1-relaxation: every general row gets a nonnegative slack priced at `weight`."""
    nz, m = H.shape[0], A.shape[0]
    eye = np.eye(m)
    H_ext = np.zeros((nz + m, nz + m))
    H_ext[:nz, :nz] = H
    H_ext[nz:, nz:] = 1e-8 * eye
    grad_ext = np.concatenate((grad, weight * np.ones(m)))
    A_ext = np.vstack((np.hstack((A, -eye)), np.hstack((A, eye))))
    lba_ext = np.concatenate((np.full(m, -np.inf), lba))
    uba_ext = np.concatenate((uba, np.full(m, np.inf)))
    lbx_ext = np.concatenate((lbx, np.zeros(m)))
    ubx_ext = np.concatenate((ubx, np.full(m, np.inf)))
    solver = model.qp_solver(nz + m, 2 * m)
    sol = solver(h=H_ext, g=grad_ext, a=A_ext, lba=lba_ext, uba=uba_ext, lbx=lbx_ext, ubx=ubx_ext)
    if not solver.stats()["success"]:
        return None
    return np.asarray(sol["x"]).reshape(-1)[:nz]


def _evaluate(problem: OcpProblem, model: NmpcModel, states, inputs, lam, refs_mat):
    N = problem.cfg.N
    gammas = problem.contact_intervals.astype(float)
    predicted = np.asarray(
        model.discrete_map(states[:-1].T, inputs.T, lam.T, np.tile(problem.w_ext[:, None], (1, N)), gammas[None, :])
    ).T
    defects = np.array([boxminus(predicted[k], states[k + 1]) for k in range(N)])
    e, _ = model.stage_map(states.T, np.zeros((NDX, N + 1)), *refs_mat)
    h, _ = model.constraint_map(states.T, np.zeros((NDX, N + 1)))
    errors, h = np.asarray(e).T, np.asarray(h).T
    cost = _cost(problem, errors, inputs, lam)
    infeas_sum, infeas_max = _infeasibility(problem, states, inputs, lam, defects, h)
    return cost, infeas_sum, infeas_max


def solve(problem: OcpProblem, warm_start: Optional[OcpSolution] = None) -> OcpSolution:
    """Gauss–Newton SQP with a merit line search; a single full step in real-time-iteration mode."""
    started = time.perf_counter()
    cfg = problem.cfg
    N = cfg.N
    model = nmpc_model(cfg, problem.params)
    refs_mat = _reference_matrix(problem.refs)
    states, inputs, lam = _initial_guess(problem, model, warm_start)

    status = STATUS_MAX_ITER
    relaxed = False
    kkt = np.inf
    merit_history: List[float] = []
    iterations = 0

    if problem.deltas[0]:
        h0 = np.asarray(model.constraint_map(states.T, np.zeros((NDX, N + 1)))[0]).T[0]
        if np.max(np.abs(h0)) > cfg.stage0_tol:
            relaxed = True
            logger.info(f"Rolling constraints violated at the measured state ({h0}); stage 0 relaxed")

    for iteration in range(cfg.max_iter):
        iterations = iteration + 1
        lin = _linearize(problem, model, states, inputs, lam, refs_mat)
        if not (np.all(np.isfinite(lin.A)) and np.all(np.isfinite(lin.defects))):
            raise InvalidArgumentError("Non-finite linearization; check the problem data")
        G, gv, H, grad, A, lba, uba, lbx, ubx = _condense(problem, lin, states, inputs, lam)

        z = _solve_qp(model, H, grad, A, lba, uba, lbx, ubx)
        if z is None:
            z = _solve_relaxed_qp(model, H, grad, A, lba, uba, lbx, ubx, cfg.slack_weight)
            if z is None:
                raise SolverError(f"QP failed at SQP iteration {iterations}, also with relaxed constraints")
            relaxed = True
            logger.info(f"QP infeasible at SQP iteration {iterations}; solved the l1-relaxed problem")

        du = z.reshape(N, NB)[:, :NU]
        dlam = z.reshape(N, NB)[:, NU:]
        dx = np.einsum("kij,j->ki", G, z) + gv

        cost0 = _cost(problem, lin.errors, inputs, lam)
        infeas_sum0, infeas_max0 = _infeasibility(problem, states, inputs, lam, lin.defects, lin.h)
        merit0 = cost0 + cfg.merit_weight * infeas_sum0
        if not merit_history:
            merit_history.append(merit0)

        step_norm = max(np.max(np.abs(du)), np.max(np.abs(dlam)), np.max(np.abs(dx)))
        kkt = max(step_norm, infeas_max0)

        alpha = 1.0
        accepted = None
        for _ in range(cfg.line_search_steps):
            trial_states = np.array([retract(states[k], alpha * dx[k]) for k in range(N + 1)])
            trial_states[0] = problem.x_est
            trial_inputs = inputs + alpha * du
            trial_lam = lam + alpha * dlam
            cost, infeas_sum, _ = _evaluate(problem, model, trial_states, trial_inputs, trial_lam, refs_mat)
            merit = cost + cfg.merit_weight * infeas_sum
            if cfg.rti or merit <= merit0:
                accepted = (trial_states, trial_inputs, trial_lam, merit)
                break
            alpha *= 0.5

        if accepted is None:
            logger.debug(f"Line search stalled at SQP iteration {iterations} (kkt {kkt:.2e})")
            if kkt <= cfg.kkt_tol:
                status = STATUS_CONVERGED
            break
        states, inputs, lam, merit = accepted
        merit_history.append(merit)

        if kkt <= cfg.kkt_tol:
            status = STATUS_CONVERGED
            break

    if relaxed:
        status = STATUS_RELAXED
    cost, _, _ = _evaluate(problem, model, states, inputs, lam, refs_mat)
    elapsed = time.perf_counter() - started
    logger.debug(f"NMPC solve: status={status}, iterations={iterations}, kkt={kkt:.2e}, {elapsed * 1e3:.1f} ms")
    return OcpSolution(
        states=states,
        inputs=inputs,
        contact_forces=lam,
        kkt_residual=float(kkt),
        iterations=iterations,
        status=status,
        cost=cost,
        deltas=problem.deltas.copy(),
        merit_history=tuple(merit_history),
        solve_time=elapsed,
    )


def control_step(
    x_est,
    traj: Sequence[ReferencePoint],
    cfg: NmpcConfig,
    params: VehicleParams,
    prev_solution: Optional[OcpSolution] = None,
    w_ext=None,
) -> Tuple[Wrench, OcpSolution]:
    """Solve the horizon and integrate the first wrench rate over one control period."""
    problem = build_ocp(x_est, traj, cfg, params, w_ext)
    solution = solve(problem, prev_solution)
    W_cmd = problem.x_est[0:6] + solution.inputs[0] * cfg.dt_ctrl
    return Wrench.from_vector(W_cmd), solution


def assemble_state(wrench: Wrench, body) -> np.ndarray:
    """Prediction state [F, M, p, v, q, ω] from the current wrench command and a RigidBodyState."""
    return np.concatenate((wrench.F, wrench.M, body.p, body.v, body.q, body.omega))


class NmpcController:
    """Owns the warm-start memory; stepped once per control tick by a single owner."""

    def __init__(self, cfg: NmpcConfig, params: VehicleParams):
        self.cfg = cfg
        self.params = params
        self.previous: Optional[OcpSolution] = None
        nmpc_model(cfg, params)

    def reset(self) -> None:
        self.previous = None

    def step(self, x_est, refs: Sequence[ReferencePoint], w_ext=None) -> Tuple[Wrench, OcpSolution]:
        W_cmd, solution = control_step(x_est, refs, self.cfg, self.params, self.previous, w_ext)
        self.previous = solution
        return W_cmd, solution
