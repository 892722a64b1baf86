"""
Fixed-step plant: rigid body with wheel-ground contact, servo and rotor lag, IMU model.

The rigid-body state vector used by the integrator is [p, v, q, omega] (13 entries).
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .allocation import AllocationModel, build_allocation, forward_wrench
from .core import (
    GRAVITY,
    ActuatorCommand,
    ActuatorState,
    RigidBodyState,
    VehicleParams,
    Wrench,
    quat_multiply,
    quat_normalize,
    quat_to_rotmat,
)
from .errors import InvalidArgumentError, SimulationDivergedError

logger = logging.getLogger(__name__)

MAX_SIM_STEP = 0.01
E_Y = np.array([0.0, 1.0, 0.0])
E_Z = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ContactConfig:
    """Baumgarte gains (1/s², 1/s), friction coefficient and activation tolerance (m)."""
    k_p: float = 400.0
    k_d: float = 40.0
    mu: float = 0.8
    contact_tol: float = 2e-3
    ground_enabled: bool = True


@dataclass(frozen=True)
class ImuNoiseConfig:
    enabled: bool = True
    accel_std: float = 0.05
    gyro_std: float = 0.005


@dataclass(frozen=True, eq=False)
class ImuSample:
    a_meas: np.ndarray
    omega_meas: np.ndarray
    timestamp: float


@dataclass(frozen=True, eq=False)
class RigidBodyDerivative:
    p_dot: np.ndarray
    v_dot: np.ndarray
    q_dot: np.ndarray
    omega_dot: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.p_dot, self.v_dot, self.q_dot, self.omega_dot))


@dataclass(frozen=True, eq=False)
class PlantState:
    """
    Snapshot of the simulated vehicle.

    ground_reaction is the body-frame wrench the ground applied over the last step;
    external_wrench adds any injected disturbance and is the ground truth for estimation.
    """
    body: RigidBodyState
    actuators: ActuatorState
    contact_active: bool = False
    ground_reaction: Wrench = field(default_factory=Wrench.zero)
    external_wrench: Wrench = field(default_factory=Wrench.zero)
    applied_wrench: Wrench = field(default_factory=Wrench.zero)
    t: float = 0.0


# --- Disturbances ---

@dataclass(frozen=True, eq=False)
class WrenchPulse:
    """Body-frame wrench active on [start, end)."""
    wrench: Wrench
    start: float = 0.0
    end: float = np.inf

    def __call__(self, t: float) -> Wrench:
        return self.wrench if self.start <= t < self.end else Wrench.zero()


class DisturbanceSchedule:
    """Sum of time-windowed (or arbitrary time-profiled) body-frame wrench injections."""

    def __init__(self, components: Optional[Sequence[Callable[[float], Wrench]]] = None):
        self.components = list(components or [])

    def add(self, component: Callable[[float], Wrench]) -> None:
        self.components.append(component)

    def __call__(self, t: float) -> Wrench:
        total = np.zeros(6)
        for component in self.components:
            total += component(t).as_vector()
        return Wrench.from_vector(total)

    def __bool__(self) -> bool:
        return bool(self.components)


# --- Rigid body ---

def _state_derivative(x: np.ndarray, F: np.ndarray, M: np.ndarray, params: VehicleParams) -> np.ndarray:
    """Derivative of [p, v, q, omega] under body-frame force F and torque M (contact included)."""
    v, q, omega = x[3:6], x[6:10], x[10:13]
    R = quat_to_rotmat(q)
    v_dot = R @ F / params.m + params.g
    q_dot = 0.5 * quat_multiply(q, np.concatenate(([0.0], omega)))
    omega_dot = np.linalg.solve(params.J, M - np.cross(omega, params.J @ omega))
    return np.concatenate((v, v_dot, q_dot, omega_dot))


def dynamics_derivative(state: RigidBodyState, W: Wrench, W_ext: Wrench, params: VehicleParams) -> RigidBodyDerivative:
    x = state.as_vector()
    d = _state_derivative(x, W.F + W_ext.F, W.M + W_ext.M, params)
    return RigidBodyDerivative(p_dot=d[0:3], v_dot=d[3:6], q_dot=d[6:10], omega_dot=d[10:13])


def mechanical_energy(body: RigidBodyState, params: VehicleParams) -> float:
    kinetic = 0.5 * params.m * float(body.v @ body.v) + 0.5 * float(body.omega @ params.J @ body.omega)
    potential = -params.m * float(params.g @ body.p)
    return kinetic + potential


# --- Contact ---

def _contact_reaction(
    x: np.ndarray, F: np.ndarray, M: np.ndarray, params: VehicleParams, cfg: ContactConfig
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Baumgarte-stabilized reaction for the rolling constraint set.

    Returns the body-frame reaction force and torque plus the normal force. A negative
    normal force is returned unclamped so the caller can release the contact.
    """
    p, v, q, omega = x[0:3], x[3:6], x[6:10], x[10:13]
    R = quat_to_rotmat(q)
    m = params.m
    a0 = params.g + R @ F / m
    b = R @ E_Y
    v_by = float(b @ v)
    coriolis = float((R @ np.cross(omega, E_Y)) @ v)

    target_az = -cfg.k_p * (p[2] - params.r_wheel) - cfg.k_d * v[2]
    target_lat = -cfg.k_d * v_by - coriolis - float(b @ a0)
    rhs = m * np.array([target_az - a0[2], target_lat])
    system = np.array([[1.0, b[2]], [b[2], 1.0]])
    normal, lateral = np.linalg.solve(system, rhs)

    if normal > 0.0 and abs(lateral) > cfg.mu * normal:
        # Sliding: friction saturates and the normal force absorbs the vertical target alone.
        direction = np.sign(lateral)
        normal = rhs[0] / (1.0 + direction * cfg.mu * b[2])
        lateral = direction * cfg.mu * max(normal, 0.0)

    J_inv = np.linalg.inv(params.J)
    omega_dot_free = J_inv @ (M - np.cross(omega, params.J @ omega))
    roll = (-cfg.k_d * omega[0] - omega_dot_free[0]) / J_inv[0, 0]
    roll_limit = max(normal, 0.0) * params.wheel_half_track
    roll = float(np.clip(roll, -roll_limit, roll_limit))

    force_body = R.T @ (normal * E_Z) + lateral * E_Y
    torque_body = np.array([roll, 0.0, 0.0])
    return force_body, torque_body, float(normal)


def resolve_contact(
    body: RigidBodyState,
    W_applied: Wrench,
    params: VehicleParams,
    cfg: Optional[ContactConfig] = None,
    was_active: bool = False,
) -> Tuple[Wrench, bool]:
    """Ground reaction (body frame) for the current state and whether contact is active."""
    cfg = cfg or ContactConfig()
    if not cfg.ground_enabled:
        return Wrench.zero(), False
    gap = body.p[2] - params.r_wheel
    engaging = gap <= cfg.contact_tol and (body.v[2] <= 0.0 or was_active)
    if not engaging:
        return Wrench.zero(), False
    force, torque, normal = _contact_reaction(body.as_vector(), W_applied.F, W_applied.M, params, cfg)
    if normal < 0.0:
        return Wrench.zero(), False
    return Wrench(force, torque), True


# --- Actuators ---

def first_order_step(current, target, dt: float, tau: float):
    if tau <= 0.0:
        return np.asarray(target, dtype=float).copy()
    return target + (current - target) * np.exp(-dt / tau)


def _advance_actuators(actuators: ActuatorState, commands: ActuatorCommand, dt: float, params: VehicleParams) -> ActuatorState:
    lo, hi = params.alpha_range
    alpha_cmd = np.clip(commands.alpha, lo, hi)
    alpha = first_order_step(actuators.alpha, alpha_cmd, dt, params.tau_servo)
    omega_cmd = np.clip(commands.omega, 0.0, params.omega_max)
    omega = np.clip(first_order_step(actuators.omega, omega_cmd, dt, params.tau_rotor), 0.0, params.omega_max)
    return ActuatorState(omega=omega, alpha=alpha, alpha_cmd=alpha_cmd)


# --- Integration ---

def step(
    plant: PlantState,
    commands: ActuatorCommand,
    dt: float,
    params: VehicleParams,
    model: Optional[AllocationModel] = None,
    contact: Optional[ContactConfig] = None,
    disturbance: Optional[Callable[[float], Wrench]] = None,
) -> PlantState:
    """Advance the plant by dt under zero-order-hold actuator commands."""
    if not (0.0 < dt <= MAX_SIM_STEP):
        raise InvalidArgumentError(f"Simulation step must lie in (0, {MAX_SIM_STEP}] s, got {dt}")
    model = model or build_allocation(params)
    contact = contact or ContactConfig()

    actuators = _advance_actuators(plant.actuators, commands, dt, params)
    W_act = forward_wrench(model, actuators, params.c_t)
    W_dist = disturbance(plant.t) if disturbance else Wrench.zero()
    F = W_act.F + W_dist.F
    M = W_act.M + W_dist.M

    _, active = resolve_contact(plant.body, Wrench(F, M), params, contact, plant.contact_active)

    reaction_sum = np.zeros(6)

    def rhs(x: np.ndarray, weight: float) -> np.ndarray:
        nonlocal reaction_sum
        F_total, M_total = F, M
        if active:
            f_c, m_c, normal = _contact_reaction(x, F, M, params, contact)
            if normal < 0.0:
                f_c, m_c = np.zeros(3), np.zeros(3)
            reaction_sum += weight * np.concatenate((f_c, m_c))
            F_total, M_total = F + f_c, M + m_c
        return _state_derivative(x, F_total, M_total, params)

    x0 = plant.body.as_vector()
    k1 = rhs(x0, 1.0)
    k2 = rhs(x0 + 0.5 * dt * k1, 2.0)
    k3 = rhs(x0 + 0.5 * dt * k2, 2.0)
    k4 = rhs(x0 + dt * k3, 1.0)
    x1 = x0 + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    if not np.all(np.isfinite(x1)):
        raise SimulationDivergedError(plant.t + dt, last_valid_state=plant)
    x1[6:10] = quat_normalize(x1[6:10])

    reaction = Wrench.from_vector(reaction_sum / 6.0)
    body = RigidBodyState.from_vector(x1)
    still_active = active and body.p[2] - params.r_wheel <= contact.contact_tol
    return PlantState(
        body=body,
        actuators=actuators,
        contact_active=bool(still_active),
        ground_reaction=reaction,
        external_wrench=reaction + W_dist,
        applied_wrench=W_act,
        t=plant.t + dt,
    )


# --- IMU ---

def sample_imu(
    prev: RigidBodyState,
    curr: RigidBodyState,
    dt: float,
    noise_cfg: Optional[ImuNoiseConfig] = None,
    rng: Optional[np.random.Generator] = None,
    timestamp: float = 0.0,
    gravity: Optional[np.ndarray] = None,
) -> ImuSample:
    """Specific force q⁻¹ ⊙ (v̇ − g) from a velocity difference, and the body rate."""
    if dt <= 0.0:
        raise InvalidArgumentError(f"IMU interval must be positive, got {dt}")
    noise_cfg = noise_cfg or ImuNoiseConfig(enabled=False)
    v_dot = (curr.v - prev.v) / dt
    gravity = GRAVITY if gravity is None else np.asarray(gravity, dtype=float)
    a_meas = curr.rotation.T @ (v_dot - gravity)
    omega_meas = np.array(curr.omega, dtype=float)
    if noise_cfg.enabled:
        rng = rng if rng is not None else np.random.default_rng()
        a_meas = a_meas + rng.normal(0.0, noise_cfg.accel_std, 3)
        omega_meas = omega_meas + rng.normal(0.0, noise_cfg.gyro_std, 3)
    return ImuSample(a_meas=a_meas, omega_meas=omega_meas, timestamp=timestamp)


# --- Stateful simulator ---

SIM_LOG_COLUMNS = (
    ["t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "q_w", "q_x", "q_y", "q_z", "w_x", "w_y", "w_z"]
    + [f"Omega_{i}" for i in range(1, 5)]
    + [f"alpha_act_{i}" for i in range(1, 5)]
    + [f"alpha_cmd_{i}" for i in range(1, 5)]
    + ["F_x", "F_y", "F_z", "M_x", "M_y", "M_z"]
    + ["Fr_x", "Fr_y", "Fr_z", "Mr_x", "Mr_y", "Mr_z", "contact"]
)


def plant_record(state: PlantState) -> List[float]:
    b, a = state.body, state.actuators
    return (
        [state.t, *b.p, *b.v, *b.q, *b.omega, *a.omega, *a.alpha, *a.alpha_cmd]
        + list(state.applied_wrench.as_vector())
        + list(state.ground_reaction.as_vector())
        + [float(state.contact_active)]
    )


class PlantSimulator:
    """
    Single-owner stepped simulator.

    Commands are held between control ticks; `advance` substeps at dt_sim and returns the
    latest immutable PlantState snapshot.
    """

    def __init__(
        self,
        params: VehicleParams,
        initial: PlantState,
        dt_sim: float = 1e-3,
        contact: Optional[ContactConfig] = None,
        disturbance: Optional[Callable[[float], Wrench]] = None,
        model: Optional[AllocationModel] = None,
        record: bool = True,
    ):
        if not (0.0 < dt_sim <= MAX_SIM_STEP):
            raise InvalidArgumentError(f"dt_sim must lie in (0, {MAX_SIM_STEP}] s, got {dt_sim}")
        self.params = params
        self.model = model or build_allocation(params)
        self.contact = contact or ContactConfig()
        self.disturbance = disturbance
        self.dt_sim = dt_sim
        self.state = initial
        self.record = record
        self._records: List[List[float]] = [plant_record(initial)] if record else []

    @classmethod
    def resting(cls, params: VehicleParams, p_xy=(0.0, 0.0), yaw: float = 0.0, **kwargs) -> "PlantSimulator":
        """Vehicle standing on its wheels with idle rotors."""
        body = RigidBodyState.at_rest(p=(p_xy[0], p_xy[1], params.r_wheel), yaw=yaw)
        initial = PlantState(body=body, actuators=ActuatorState.idle(), contact_active=True)
        return cls(params, initial, **kwargs)

    def advance(self, commands: ActuatorCommand, duration: float) -> PlantState:
        n_steps = int(round(duration / self.dt_sim))
        if n_steps < 1 or abs(n_steps * self.dt_sim - duration) > 1e-9:
            raise InvalidArgumentError(f"Duration {duration} is not a multiple of dt_sim {self.dt_sim}")
        was_active = self.state.contact_active
        for _ in range(n_steps):
            self.state = step(self.state, commands, self.dt_sim, self.params, self.model, self.contact, self.disturbance)
            if self.record:
                self._records.append(plant_record(self.state))
        if self.state.contact_active != was_active:
            logger.info(f"Contact {'engaged' if self.state.contact_active else 'released'} at t={self.state.t:.3f} s")
        return self.state

    def log_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._records, columns=SIM_LOG_COLUMNS)
