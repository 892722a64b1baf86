"""
Parametric references: hover, position step, figure-eight (aerial or rolling) and the
hybrid air-to-ground mission. Every trajectory is immutable and evaluated purely in time.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import quat_from_rotmat, quat_from_yaw
from .errors import InvalidArgumentError, PlanningError

logger = logging.getLogger(__name__)

GRAVITY_Z = -9.81
PHASE_AERIAL = "aerial"
PHASE_TRANSITION = "transition"
PHASE_GROUND = "ground"
PHASES = (PHASE_AERIAL, PHASE_TRANSITION, PHASE_GROUND)


@dataclass(frozen=True, eq=False)
class ReferencePoint:
    """Reference pose, twist and feedforward acceleration at one instant."""
    t: float
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    a: np.ndarray
    contact: bool = False
    phase: str = PHASE_AERIAL

    @property
    def p_rz_contact(self) -> bool:
        return self.contact


class Trajectory(ABC):
    """Time-parameterized reference defined on [0, duration]; evaluation clamps outside."""

    duration: float
    v_max: float

    @abstractmethod
    def _evaluate(self, t: float) -> ReferencePoint:
        ...

    def evaluate(self, t: float) -> ReferencePoint:
        return self._evaluate(float(np.clip(t, 0.0, self.duration)))

    def sample(self, times) -> List[ReferencePoint]:
        return [self.evaluate(t) for t in times]


def sample_horizon(traj: Trajectory, t: float, N: int, dt: float) -> List[ReferencePoint]:
    """N+1 stage-aligned reference points starting at t (held at the final point past the end)."""
    if N < 1 or dt <= 0.0:
        raise InvalidArgumentError(f"Horizon needs N >= 1 and dt > 0, got N={N}, dt={dt}")
    return [traj.evaluate(t + k * dt) for k in range(N + 1)]


# --- Attitude helpers ---

def level_attitude(yaw: float, yaw_rate: float) -> Tuple[np.ndarray, np.ndarray]:
    return quat_from_yaw(yaw), np.array([0.0, 0.0, yaw_rate])


def flat_attitude(a: np.ndarray, jerk: np.ndarray, yaw: float, yaw_rate: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Attitude whose body z is along the specific force a − g with the given heading, and
    the body rate that follows from the jerk.
    """
    f = a - np.array([0.0, 0.0, GRAVITY_Z])
    f_norm = np.linalg.norm(f)
    if f_norm < 1e-6:
        raise PlanningError("Reference demands free fall; body z is undefined")
    z_b = f / f_norm
    z_dot = (jerk - (z_b @ jerk) * z_b) / f_norm

    x_c = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    x_c_dot = yaw_rate * np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    u = np.cross(z_b, x_c)
    u_norm = np.linalg.norm(u)
    y_b = u / u_norm
    u_dot = np.cross(z_dot, x_c) + np.cross(z_b, x_c_dot)
    y_dot = (u_dot - y_b * (y_b @ u_dot)) / u_norm
    x_b = np.cross(y_b, z_b)
    x_dot = np.cross(y_dot, z_b) + np.cross(y_b, z_dot)

    R = np.column_stack((x_b, y_b, z_b))
    omega = np.array([-(y_b @ z_dot), x_b @ z_dot, y_b @ x_dot])
    return quat_from_rotmat(R), omega


# --- Simple references ---

class HoverTrajectory(Trajectory):
    """Constant pose; flagged as a ground reference when the height equals the wheel radius."""

    def __init__(self, position, yaw: float = 0.0, duration: float = 10.0, r_wheel: Optional[float] = None):
        self.position = np.asarray(position, dtype=float)
        self.yaw = yaw
        self.duration = duration
        self.v_max = 0.0
        self.contact = r_wheel is not None and abs(self.position[2] - r_wheel) < 1e-12

    def _evaluate(self, t: float) -> ReferencePoint:
        q, omega = level_attitude(self.yaw, 0.0)
        return ReferencePoint(
            t=t,
            p=self.position.copy(),
            v=np.zeros(3),
            q=q,
            omega=omega,
            a=np.zeros(3),
            contact=self.contact,
            phase=PHASE_GROUND if self.contact else PHASE_AERIAL,
        )


class StepTrajectory(Trajectory):
    """Hold `start`, then jump to `target` at `step_time`."""

    def __init__(self, start, target, step_time: float = 0.0, duration: float = 10.0, yaw: float = 0.0):
        self.start = np.asarray(start, dtype=float)
        self.target = np.asarray(target, dtype=float)
        self.step_time = step_time
        self.duration = duration
        self.yaw = yaw
        self.v_max = 0.0

    def _evaluate(self, t: float) -> ReferencePoint:
        q, omega = level_attitude(self.yaw, 0.0)
        p = self.target if t >= self.step_time else self.start
        return ReferencePoint(t=t, p=p.copy(), v=np.zeros(3), q=q, omega=omega, a=np.zeros(3))


# --- Figure-eight ---

def _smootherstep(x):
    """Speed profile 10x³ − 15x⁴ + 6x⁵ and its integral and first two derivatives."""
    h = x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)
    integral = x ** 4 * (2.5 - 3.0 * x + x ** 2)
    h1 = 30.0 * x ** 2 * (1.0 - x) ** 2
    h2 = 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x)
    return h, integral, h1, h2


class FigureEight(Trajectory):
    """
    Lissajous figure-eight p(s) = c + (A_x sin s, A_y sin 2s, z + A_z sin s).

    The path parameter rises with smooth speed ramps at both ends, so the reference starts
    and stops at rest at the center; the cruise rate puts the peak speed at v_max.
    """

    RAMP_DOUBLINGS = 4

    def __init__(
        self,
        center=(0.0, 0.0),
        half_width: float = 2.0,
        half_height: float = 1.0,
        altitude: float = 1.0,
        v_max: float = 1.5,
        a_max: float = 1.5,
        vertical_amplitude: float = 0.25,
        laps: float = 1.0,
        ground: bool = False,
        heading: str = "tangent",
        yaw: float = 0.0,
        attitude: str = "flat",
        start_time: float = 0.0,
    ):
        if half_width <= 0.0 or half_height <= 0.0:
            raise PlanningError(f"Figure-eight half extents must be positive, got {half_width}, {half_height}")
        if v_max <= 0.0 or a_max <= 0.0:
            raise PlanningError(f"v_max and a_max must be positive, got {v_max}, {a_max}")
        if laps <= 0.0:
            raise PlanningError(f"laps must be positive, got {laps}")
        if heading not in ("tangent", "constant"):
            raise InvalidArgumentError(f"Unknown heading policy '{heading}'")
        if attitude not in ("flat", "level"):
            raise InvalidArgumentError(f"Unknown attitude mode '{attitude}'")
        center = np.asarray(center, dtype=float).reshape(-1)
        self.center = np.array([center[0], center[1], altitude])
        self.A = np.array([half_width, half_height, 0.0 if ground else vertical_amplitude])
        self.v_max = v_max
        self.a_max = a_max
        self.ground = ground
        # Rolling references must stay heading-aligned and level.
        self.heading = "tangent" if ground else heading
        self.attitude = "level" if ground else attitude
        self.yaw0 = yaw
        self.start_time = start_time
        self.span = 2.0 * np.pi * laps

        s_grid = np.linspace(0.0, 2.0 * np.pi, 4001)
        d1 = self._derivs(s_grid, 1)
        d2 = self._derivs(s_grid, 2)
        self.rate = v_max / np.max(np.linalg.norm(d1, axis=0))
        cruise_accel = np.max(np.linalg.norm(d2, axis=0)) * self.rate ** 2
        if cruise_accel > a_max:
            raise PlanningError(
                f"v_max={v_max} m/s needs {cruise_accel:.3f} m/s² on this figure-eight, above a_max={a_max}"
            )
        self.ramp_time = self._fit_ramp(3.0 * v_max / a_max)
        self.cruise_time = (self.span - self.rate * self.ramp_time) / self.rate
        self.duration = start_time + self.cruise_time + 2.0 * self.ramp_time

    def _derivs(self, s, order: int) -> np.ndarray:
        Ax, Ay, Az = self.A
        if order == 0:
            return np.array([Ax * np.sin(s), Ay * np.sin(2 * s), Az * np.sin(s)])
        if order == 1:
            return np.array([Ax * np.cos(s), 2 * Ay * np.cos(2 * s), Az * np.cos(s)])
        if order == 2:
            return np.array([-Ax * np.sin(s), -4 * Ay * np.sin(2 * s), -Az * np.sin(s)])
        return np.array([-Ax * np.cos(s), -8 * Ay * np.cos(2 * s), -Az * np.cos(s)])

    def _fit_ramp(self, ramp_time: float) -> float:
        for _ in range(self.RAMP_DOUBLINGS + 1):
            if self.rate * ramp_time > self.span:
                break
            self.ramp_time = ramp_time
            x = np.linspace(0.0, 1.0, 2001)
            h, integral, h1, _ = _smootherstep(x)
            s = self.rate * ramp_time * integral
            s_dot = self.rate * h
            s_ddot = self.rate * h1 / ramp_time
            accel = self._derivs(s, 2) * s_dot ** 2 + self._derivs(s, 1) * s_ddot
            if np.max(np.linalg.norm(accel, axis=0)) <= self.a_max:
                return ramp_time
            ramp_time *= 2.0
        raise PlanningError(
            f"Cannot ramp to v_max={self.v_max} m/s within a_max={self.a_max} m/s² over {self.span / (2 * np.pi):.2f} laps"
        )

    def _path_parameter(self, t: float) -> Tuple[float, float, float, float]:
        """s and its first three time derivatives at local time t."""
        T_r, w = self.ramp_time, self.rate
        if t < T_r:
            h, integral, h1, h2 = _smootherstep(t / T_r)
            return w * T_r * integral, w * h, w * h1 / T_r, w * h2 / T_r ** 2
        if t <= T_r + self.cruise_time:
            return w * T_r / 2.0 + w * (t - T_r), w, 0.0, 0.0
        x = (self.cruise_time + 2.0 * T_r - t) / T_r
        h, integral, h1, h2 = _smootherstep(max(x, 0.0))
        return self.span - w * T_r * integral, w * h, -w * h1 / T_r, w * h2 / T_r ** 2

    def _heading(self, s: float, s_dot: float) -> Tuple[float, float]:
        if self.heading == "constant":
            return self.yaw0, 0.0
        d1 = self._derivs(s, 1)
        d2 = self._derivs(s, 2)
        yaw = float(np.arctan2(d1[1], d1[0]))
        curvature = (d1[0] * d2[1] - d1[1] * d2[0]) / (d1[0] ** 2 + d1[1] ** 2)
        return yaw, float(curvature * s_dot)

    def _evaluate(self, t: float) -> ReferencePoint:
        local = min(max(t - self.start_time, 0.0), self.duration - self.start_time)
        s, s1, s2, s3 = self._path_parameter(local)
        d1, d2, d3 = self._derivs(s, 1), self._derivs(s, 2), self._derivs(s, 3)
        p = self.center + self._derivs(s, 0)
        v = d1 * s1
        a = d2 * s1 ** 2 + d1 * s2
        jerk = d3 * s1 ** 3 + 3.0 * d2 * s1 * s2 + d1 * s3
        yaw, yaw_rate = self._heading(s, s1)
        if self.attitude == "flat":
            q, omega = flat_attitude(a, jerk, yaw, yaw_rate)
        else:
            q, omega = level_attitude(yaw, yaw_rate)
        phase = PHASE_GROUND if self.ground else PHASE_AERIAL
        return ReferencePoint(t=t, p=p, v=v, q=q, omega=omega, a=a, contact=self.ground, phase=phase)

    @property
    def end_point(self) -> np.ndarray:
        return self.center + self._derivs(self.span, 0)

    def end_yaw(self) -> float:
        return self._heading(self.span, 0.0)[0]

    def start_yaw(self) -> float:
        return self._heading(0.0, 0.0)[0]


def figure_eight(
    center=(0.0, 0.0),
    half_width: float = 2.0,
    half_height: float = 1.0,
    altitude: float = 1.0,
    v_max: float = 1.5,
    a_max: float = 1.5,
    **kwargs,
) -> FigureEight:
    return FigureEight(center, half_width, half_height, altitude, v_max, a_max, **kwargs)


# --- Hybrid mission ---

def _hermite(tau: float, p0, p1, v0, v1, T: float):
    """Cubic Hermite value, first and second time derivatives at normalized time tau."""
    h00 = 2 * tau ** 3 - 3 * tau ** 2 + 1
    h10 = tau ** 3 - 2 * tau ** 2 + tau
    h01 = -2 * tau ** 3 + 3 * tau ** 2
    h11 = tau ** 3 - tau ** 2
    d00, d10, d01, d11 = 6 * tau ** 2 - 6 * tau, 3 * tau ** 2 - 4 * tau + 1, -6 * tau ** 2 + 6 * tau, 3 * tau ** 2 - 2 * tau
    s00, s10, s01, s11 = 12 * tau - 6, 6 * tau - 4, -12 * tau + 6, 6 * tau - 2
    value = h00 * p0 + h10 * T * v0 + h01 * p1 + h11 * T * v1
    rate = (d00 * p0 + d10 * T * v0 + d01 * p1 + d11 * T * v1) / T
    accel = (s00 * p0 + s10 * T * v0 + s01 * p1 + s11 * T * v1) / T ** 2
    return value, rate, accel


class HybridMission(Trajectory):
    """Aerial figure-eight, cubic descent onto the wheels, then a rolling figure-eight."""

    def __init__(self, aerial: FigureEight, ground: FigureEight, transition_duration: float, r_wheel: float):
        if transition_duration < 1.0:
            raise PlanningError(f"Transition must last at least 1 s, got {transition_duration}")
        if not ground.ground or abs(ground.center[2] - r_wheel) > 1e-12:
            raise PlanningError("The ground segment must be a rolling figure-eight at the wheel radius")
        self.aerial = aerial
        self.r_wheel = r_wheel
        self.transition_duration = transition_duration
        self.t_transition = aerial.duration
        self.t_ground = aerial.duration + transition_duration
        self.ground = FigureEight(
            center=ground.center[:2],
            half_width=ground.A[0],
            half_height=ground.A[1],
            altitude=r_wheel,
            v_max=ground.v_max,
            a_max=ground.a_max,
            laps=ground.span / (2 * np.pi),
            ground=True,
            start_time=self.t_ground,
        )
        self.duration = self.ground.duration
        self.v_max = max(aerial.v_max, ground.v_max)
        self.a_max = max(aerial.a_max, ground.a_max)
        self.start = aerial.end_point
        self.stop = self.ground.center.copy()
        self.yaw_start = aerial.end_yaw() if aerial.heading == "tangent" else aerial.yaw0
        yaw_stop = self.ground.start_yaw()
        self.yaw_stop = self.yaw_start + np.arctan2(np.sin(yaw_stop - self.yaw_start), np.cos(yaw_stop - self.yaw_start))
        self._check_transition()

    def _check_transition(self) -> None:
        taus = np.linspace(0.0, 1.0, 1001)
        speeds, accels = [], []
        for tau in taus:
            _, v, a = self._blend(tau)
            speeds.append(np.linalg.norm(v))
            accels.append(np.linalg.norm(a))
        # The descent is flown, so it is held to the aerial limits.
        if max(speeds) > self.aerial.v_max + 1e-9 or max(accels) > self.aerial.a_max:
            raise PlanningError(
                f"Transition over {self.transition_duration} s needs speed {max(speeds):.3f} m/s and "
                f"acceleration {max(accels):.3f} m/s², beyond the mission limits"
            )

    def _blend(self, tau: float):
        # Touches down at rest, where the rolling figure-eight starts.
        return _hermite(tau, self.start, self.stop, np.zeros(3), np.zeros(3), self.transition_duration)

    def _evaluate(self, t: float) -> ReferencePoint:
        if t < self.t_transition:
            return self.aerial.evaluate(t)
        if t >= self.t_ground:
            return self.ground.evaluate(t)
        T = self.transition_duration
        tau = (t - self.t_transition) / T
        p, v, a = self._blend(tau)
        yaw, yaw_rate, _ = _hermite(tau, self.yaw_start, self.yaw_stop, 0.0, 0.0, T)
        q, omega = level_attitude(yaw, yaw_rate)
        return ReferencePoint(t=t, p=p, v=v, q=q, omega=omega, a=a, contact=False, phase=PHASE_TRANSITION)

    def phase_at(self, t: float) -> str:
        return self.evaluate(t).phase


def hybrid_mission(aerial_params: dict, ground_params: dict, transition_duration: float, r_wheel: float) -> HybridMission:
    aerial = FigureEight(**aerial_params)
    ground = FigureEight(**{**ground_params, "altitude": r_wheel, "ground": True})
    return HybridMission(aerial, ground, transition_duration, r_wheel)
