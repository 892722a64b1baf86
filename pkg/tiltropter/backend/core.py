"""
Kinematic primitives and the shared vehicle data model.

Quaternions are scalar-first (w, x, y, z) and rotate body-frame vectors into the inertial
ENU frame. Every other module goes through the helpers below instead of re-deriving the
convention.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import InvalidArgumentError, ParameterError

logger = logging.getLogger(__name__)

GRAVITY = np.array([0.0, 0.0, -9.81])
UNIT_TOLERANCE = 1e-6


def _as_vec(value, size: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise InvalidArgumentError(f"{name} must have {size} components, got shape {arr.shape}")
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


def _require_unit(q: np.ndarray, name: str = "q", tol: float = UNIT_TOLERANCE) -> None:
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or abs(norm - 1.0) > tol:
        raise InvalidArgumentError(f"{name} is not a unit quaternion (|{name}| = {norm:.3e})")


# --- Quaternion algebra ---

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product a ⊗ b."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_inverse(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return quat_conjugate(q) / float(np.dot(q, q))


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if norm == 0.0 or not np.isfinite(norm):
        raise InvalidArgumentError("Cannot normalize a zero or non-finite quaternion")
    return q / norm


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = _as_vec(axis, 3, "axis")
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate(([np.cos(half)], np.sin(half) * axis))


def quat_from_yaw(yaw: float) -> np.ndarray:
    return np.array([np.cos(0.5 * yaw), 0.0, 0.0, np.sin(0.5 * yaw)])


def quat_to_rotmat(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_rotmat(R) -> np.ndarray:
    """Shepperd's method; returns the representative with nonnegative scalar part."""
    R = np.asarray(R, dtype=float)
    trace = np.trace(R)
    if trace > 0.0:
        s = 2.0 * np.sqrt(1.0 + trace)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = quat_normalize(q)
    return q if q[0] >= 0.0 else -q


def quat_rotate(q, v) -> np.ndarray:
    """Rotate v by q (the ⊙ operator): returns R(q)·v."""
    q = _as_vec(q, 4, "q")
    v = _as_vec(v, 3, "v")
    _require_unit(q)
    w, u = q[0], q[1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_rotate_inverse(q, v) -> np.ndarray:
    """Rotate v by q⁻¹: returns R(q)ᵀ·v."""
    q = _as_vec(q, 4, "q")
    return quat_rotate(quat_conjugate(q), v)


def quat_derivative(q, omega) -> np.ndarray:
    """q̇ = ½ q ⊗ (0, ω) with ω in the body frame."""
    q = _as_vec(q, 4, "q")
    omega = _as_vec(omega, 3, "omega")
    _require_unit(q)
    return 0.5 * quat_multiply(q, np.concatenate(([0.0], omega)))


def quat_error(q, q_ref) -> np.ndarray:
    """Minimal rotation q ⊗ q_ref⁻¹, sign chosen so the scalar part is nonnegative."""
    q = _as_vec(q, 4, "q")
    q_ref = _as_vec(q_ref, 4, "q_ref")
    _require_unit(q)
    _require_unit(q_ref, "q_ref")
    err = quat_multiply(q, quat_conjugate(q_ref))
    return err if err[0] >= 0.0 else -err


def quat_exp(delta_theta) -> np.ndarray:
    """Unit quaternion of the rotation vector delta_theta."""
    delta_theta = _as_vec(delta_theta, 3, "delta_theta")
    angle = np.linalg.norm(delta_theta)
    if angle < 1e-12:
        return quat_normalize(np.concatenate(([1.0], 0.5 * delta_theta)))
    return quat_from_axis_angle(delta_theta / angle, angle)


def yaw_of(q) -> float:
    w, x, y, z = q
    return float(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# --- Value types ---

@dataclass(frozen=True, eq=False)
class RigidBodyState:
    """Pose and twist of the CoM: p, v inertial; q body-to-inertial; omega body."""
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _frozen(_as_vec(self.p, 3, "p")))
        object.__setattr__(self, "v", _frozen(_as_vec(self.v, 3, "v")))
        q = _as_vec(self.q, 4, "q")
        _require_unit(q)
        object.__setattr__(self, "q", _frozen(q / np.linalg.norm(q)))
        object.__setattr__(self, "omega", _frozen(_as_vec(self.omega, 3, "omega")))
        if not self.is_finite():
            raise InvalidArgumentError("RigidBodyState components must be finite")

    @classmethod
    def at_rest(cls, p=(0.0, 0.0, 0.0), yaw: float = 0.0) -> "RigidBodyState":
        return cls(p=np.asarray(p, dtype=float), v=np.zeros(3), q=quat_from_yaw(yaw), omega=np.zeros(3))

    @classmethod
    def from_vector(cls, x) -> "RigidBodyState":
        x = _as_vec(x, 13, "state vector")
        return cls(p=x[0:3], v=x[3:6], q=quat_normalize(x[6:10]), omega=x[10:13])

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.p, self.v, self.q, self.omega))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.as_vector())))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    @property
    def body_velocity(self) -> np.ndarray:
        return quat_rotate_inverse(self.q, self.v)


@dataclass(frozen=True, eq=False)
class Wrench:
    """Body-frame force (N) and torque (N·m). Also used for estimates and wrench rates."""
    F: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "F", _frozen(_as_vec(self.F, 3, "F")))
        object.__setattr__(self, "M", _frozen(_as_vec(self.M, 3, "M")))
        if not (np.all(np.isfinite(self.F)) and np.all(np.isfinite(self.M))):
            raise InvalidArgumentError("Wrench components must be finite")

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, w) -> "Wrench":
        w = _as_vec(w, 6, "wrench")
        return cls(w[:3], w[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate((self.F, self.M))

    def __add__(self, other: "Wrench") -> "Wrench":
        return Wrench(self.F + other.F, self.M + other.M)

    def __sub__(self, other: "Wrench") -> "Wrench":
        return Wrench(self.F - other.F, self.M - other.M)

    def scaled(self, factor: float) -> "Wrench":
        return Wrench(factor * self.F, factor * self.M)


def x_frame_rotor_positions(arm_length: float) -> np.ndarray:
    azimuths = np.deg2rad([45.0, 135.0, -135.0, -45.0])
    return np.column_stack((arm_length * np.cos(azimuths), arm_length * np.sin(azimuths), np.zeros(4)))


@dataclass(frozen=True, eq=False)
class VehicleParams:
    """
    Physical parameterization of the vehicle.

    Defaults describe a symmetric X frame with 0.15 m arms; J, c_t, c_q, omega_max and
    tau_servo are stand-ins of plausible magnitude, not measured values.
    """
    m: float = 1.5
    J: np.ndarray = field(default_factory=lambda: np.diag([0.012, 0.012, 0.02]))
    g: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    c_t: float = 1.2e-5
    c_q: float = 1.9e-7
    rotor_positions: np.ndarray = field(default_factory=lambda: x_frame_rotor_positions(0.15))
    arm_axes: Optional[np.ndarray] = None
    spin_dirs: Tuple[int, int, int, int] = (1, 1, -1, -1)
    r_wheel: float = 0.1
    tau_servo: float = 0.05
    omega_max: float = 2500.0
    tau_rotor: float = 0.0
    alpha_range: Tuple[float, float] = (-np.pi, np.pi)
    alpha_rate_max: float = 8.0
    epsilon_thrust: float = 1e-4
    neglect_drag_torque: bool = False
    wheel_arms: Tuple[int, int] = (1, 3)
    wheel_half_track: float = 0.15

    def __post_init__(self):
        positions = np.asarray(self.rotor_positions, dtype=float)
        if positions.shape != (4, 3):
            raise ParameterError(f"rotor_positions must be 4x3, got {positions.shape}")
        if self.arm_axes is None:
            horizontal = positions.copy()
            horizontal[:, 2] = 0.0
            axes = horizontal / np.linalg.norm(horizontal, axis=1, keepdims=True)
        else:
            axes = np.asarray(self.arm_axes, dtype=float)
        object.__setattr__(self, "rotor_positions", _frozen(positions))
        object.__setattr__(self, "arm_axes", _frozen(axes))
        object.__setattr__(self, "J", _frozen(np.asarray(self.J, dtype=float)))
        object.__setattr__(self, "g", _frozen(_as_vec(self.g, 3, "g")))
        object.__setattr__(self, "spin_dirs", tuple(int(s) for s in self.spin_dirs))
        self.validate()

    def validate(self) -> None:
        if self.m <= 0.0:
            raise ParameterError(f"Mass must be positive, got {self.m}")
        if self.c_t <= 0.0:
            raise ParameterError(f"Thrust coefficient must be positive, got {self.c_t}")
        if self.c_q < 0.0:
            raise ParameterError(f"Drag coefficient must be nonnegative, got {self.c_q}")
        if self.r_wheel <= 0.0:
            raise ParameterError(f"Wheel radius must be positive, got {self.r_wheel}")
        if self.tau_servo <= 0.0:
            raise ParameterError(f"Servo time constant must be positive, got {self.tau_servo}")
        if self.tau_rotor < 0.0:
            raise ParameterError(f"Rotor time constant must be nonnegative, got {self.tau_rotor}")
        if self.omega_max <= 0.0:
            raise ParameterError(f"Rotor speed limit must be positive, got {self.omega_max}")
        if self.J.shape != (3, 3) or not np.allclose(self.J, self.J.T, atol=1e-12):
            raise ParameterError("Inertia tensor must be a symmetric 3x3 matrix")
        if np.min(np.linalg.eigvalsh(self.J)) <= 0.0:
            raise ParameterError("Inertia tensor must be positive-definite")
        if self.arm_axes.shape != (4, 3):
            raise ParameterError(f"arm_axes must be 4x3, got {self.arm_axes.shape}")
        norms = np.linalg.norm(self.arm_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ParameterError(f"arm_axes must be unit vectors, norms are {norms}")
        if len(self.spin_dirs) != 4 or any(s not in (-1, 1) for s in self.spin_dirs):
            raise ParameterError(f"spin_dirs must be four values in {{-1, +1}}, got {self.spin_dirs}")
        directions = self.rotor_positions / np.linalg.norm(self.rotor_positions, axis=1, keepdims=True)
        for i in range(4):
            for j in range(i + 1, 4):
                if np.linalg.norm(directions[i] - directions[j]) < 1e-9:
                    raise ParameterError(f"Rotors {i + 1} and {j + 1} share the same direction from the CoM")
        lo, hi = self.alpha_range
        if lo >= hi:
            raise ParameterError(f"alpha_range must be increasing, got {self.alpha_range}")

        # Rank of the allocation matrix is part of parameter validity.
        from .allocation import allocation_matrix, check_rank
        check_rank(allocation_matrix(self))

    @property
    def weight(self) -> float:
        return self.m * float(np.linalg.norm(self.g))

    @property
    def thrust_max(self) -> float:
        return self.c_t * self.omega_max ** 2

    @property
    def drag_ratio(self) -> float:
        return 0.0 if self.neglect_drag_torque else self.c_q / self.c_t


@dataclass(frozen=True, eq=False)
class ActuatorState:
    """Rotor speeds (rad/s), actual tilt angles and commanded tilt angles (rad), per rotor."""
    omega: np.ndarray
    alpha: np.ndarray
    alpha_cmd: np.ndarray

    def __post_init__(self):
        for name in ("omega", "alpha", "alpha_cmd"):
            value = _as_vec(getattr(self, name), 4, name)
            if not np.all(np.isfinite(value)):
                raise InvalidArgumentError(f"ActuatorState.{name} must be finite")
            object.__setattr__(self, name, _frozen(value))
        if np.any(self.omega < 0.0):
            raise InvalidArgumentError(f"Rotor speeds must be nonnegative, got {self.omega}")

    @classmethod
    def idle(cls, alpha: float = np.pi / 2) -> "ActuatorState":
        angles = np.full(4, alpha)
        return cls(np.zeros(4), angles, angles)

    def within_limits(self, params: VehicleParams) -> bool:
        lo, hi = params.alpha_range
        return bool(
            np.all(self.omega <= params.omega_max + 1e-9)
            and np.all(self.alpha >= lo - 1e-12)
            and np.all(self.alpha <= hi + 1e-12)
        )


@dataclass(frozen=True, eq=False)
class ActuatorCommand:
    """Rotor speed and tilt commands, with the saturation report of the extraction."""
    omega: np.ndarray
    alpha: np.ndarray
    saturated: bool = False
    saturated_rotors: Tuple[int, ...] = ()
    held_rotors: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "omega", _frozen(_as_vec(self.omega, 4, "omega")))
        object.__setattr__(self, "alpha", _frozen(_as_vec(self.alpha, 4, "alpha")))

