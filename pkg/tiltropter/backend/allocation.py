"""
Static tilt-rotor allocation.

Each rotor's thrust is split into a lateral component (along the tangential direction
ẑ × arm axis, the direction the rotor tilts toward) and a vertical component (body z).
With that split the wrench is linear in the 8-vector of components, so one constant
6x8 matrix covers every tilt configuration.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from .core import ActuatorCommand, ActuatorState, Wrench
from .errors import AllocationRankError, InvalidArgumentError, SingularConfigurationError

logger = logging.getLogger(__name__)

WRENCH_LABELS = ("F_x", "F_y", "F_z", "M_x", "M_y", "M_z")
PINV_CUTOFF = 1e-8
DEFAULT_EPSILON_THRUST = 1e-4


def thrust_labels() -> List[str]:
    labels = []
    for i in range(1, 5):
        labels.extend([f"T{i}_l", f"T{i}_v"])
    return labels


def tangential_axes(arm_axes: np.ndarray) -> np.ndarray:
    z = np.array([0.0, 0.0, 1.0])
    tangents = np.cross(z, arm_axes)
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    if np.any(norms < 1e-9):
        raise InvalidArgumentError("An arm axis is parallel to body z; its tilt direction is undefined")
    return tangents / norms


def allocation_matrix(params) -> np.ndarray:
    """Columns 2i, 2i+1 hold the wrench of a unit lateral / vertical thrust at rotor i."""
    z = np.array([0.0, 0.0, 1.0])
    tangents = tangential_axes(np.asarray(params.arm_axes))
    k = params.drag_ratio
    A = np.zeros((6, 8))
    for i in range(4):
        r = params.rotor_positions[i]
        s = params.spin_dirs[i]
        for col, direction in ((2 * i, tangents[i]), (2 * i + 1, z)):
            A[:3, col] = direction
            # Rotor drag reacts against the spin, about the thrust direction.
            A[3:, col] = np.cross(r, direction) - s * k * direction
    return A


def _describe_direction(vec: np.ndarray) -> str:
    terms = [f"{c:+.2f}*{label}" for c, label in zip(vec, WRENCH_LABELS) if abs(c) > 1e-3]
    return " ".join(terms) if terms else "0"


def check_rank(A: np.ndarray) -> int:
    U, sigma, _ = np.linalg.svd(A)
    cutoff = PINV_CUTOFF * sigma[0]
    rank = int(np.sum(sigma > cutoff))
    if rank < 6:
        deficient = [_describe_direction(U[:, j]) for j in range(rank, 6)]
        raise AllocationRankError(rank, deficient)
    return rank


@dataclass(frozen=True, eq=False)
class AllocationModel:
    """Allocation matrix A (6x8) and its pseudoinverse, fixed by the vehicle geometry."""
    A: np.ndarray
    A_pinv: np.ndarray
    c_t: float
    omega_max: float
    epsilon_thrust: float = DEFAULT_EPSILON_THRUST

    def __post_init__(self):
        for name in ("A", "A_pinv"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def thrust_max(self) -> float:
        return self.c_t * self.omega_max ** 2


@dataclass(frozen=True, eq=False)
class IntermediateThrust:
    """Per-rotor (lateral, vertical) thrust components, ordered T1_l, T1_v, ..., T4_v."""
    T: np.ndarray

    def __post_init__(self):
        T = np.asarray(self.T, dtype=float).reshape(-1)
        if T.shape != (8,):
            raise InvalidArgumentError(f"Intermediate thrust must have 8 components, got {T.shape}")
        T.setflags(write=False)
        object.__setattr__(self, "T", T)

    @property
    def lateral(self) -> np.ndarray:
        return self.T[0::2]

    @property
    def vertical(self) -> np.ndarray:
        return self.T[1::2]

    @property
    def magnitudes(self) -> np.ndarray:
        return np.hypot(self.lateral, self.vertical)


def build_allocation(params) -> AllocationModel:
    A = allocation_matrix(params)
    check_rank(A)
    A_pinv = np.linalg.pinv(A, rcond=PINV_CUTOFF)
    logger.debug(f"Built allocation model, singular values {np.linalg.svd(A, compute_uv=False)}")
    return AllocationModel(
        A=A,
        A_pinv=A_pinv,
        c_t=params.c_t,
        omega_max=params.omega_max,
        epsilon_thrust=params.epsilon_thrust,
    )


def _wrench_vector(W) -> np.ndarray:
    vec = W.as_vector() if isinstance(W, Wrench) else np.asarray(W, dtype=float).reshape(-1)
    if vec.shape != (6,):
        raise InvalidArgumentError(f"Wrench must have 6 components, got {vec.shape}")
    return vec


def inverse_allocate(model: AllocationModel, W) -> IntermediateThrust:
    """Minimum-norm intermediate thrust T = A†W."""
    return IntermediateThrust(model.A_pinv @ _wrench_vector(W))


def extract_commands(
    T: IntermediateThrust,
    c_t: float,
    omega_max: float = np.inf,
    previous_alpha: Optional[Iterable[float]] = None,
    epsilon_thrust: float = DEFAULT_EPSILON_THRUST,
) -> ActuatorCommand:
    """
    Polar decomposition of each rotor's thrust into speed and tilt.

    Below epsilon_thrust the tilt is undefined and the previous command is held. Thrust
    above c_t·omega_max² is clamped and reported, never redistributed.
    """
    if not np.all(np.isfinite(T.T)):
        raise InvalidArgumentError("Intermediate thrust must be finite")
    prev = np.full(4, np.pi / 2) if previous_alpha is None else np.asarray(previous_alpha, dtype=float)
    lateral, vertical = T.lateral, T.vertical
    magnitude = np.hypot(lateral, vertical)

    held = magnitude < epsilon_thrust
    alpha = np.where(held, prev, np.arctan2(vertical, lateral))

    thrust_max = c_t * omega_max ** 2
    saturated = magnitude > thrust_max
    if np.any(saturated):
        logger.debug(f"Thrust saturation on rotors {np.flatnonzero(saturated) + 1}: {magnitude}")
    omega = np.sqrt(np.minimum(magnitude, thrust_max) / c_t)

    return ActuatorCommand(
        omega=omega,
        alpha=alpha,
        saturated=bool(np.any(saturated)),
        saturated_rotors=tuple(int(i) for i in np.flatnonzero(saturated)),
        held_rotors=tuple(int(i) for i in np.flatnonzero(held)),
    )


def thrust_components(actuators: ActuatorState, c_t: float, use_commanded: bool = False) -> np.ndarray:
    alpha = actuators.alpha_cmd if use_commanded else actuators.alpha
    thrust = c_t * actuators.omega ** 2
    T = np.empty(8)
    T[0::2] = thrust * np.cos(alpha)
    T[1::2] = thrust * np.sin(alpha)
    return T


def forward_wrench(model: AllocationModel, actuators: ActuatorState, c_t: Optional[float] = None) -> Wrench:
    """Wrench produced by the actual tilt angles and rotor speeds."""
    c_t = model.c_t if c_t is None else c_t
    return Wrench.from_vector(model.A @ thrust_components(actuators, c_t))


def forward_wrench_from_angles(model: AllocationModel, omega, alpha, c_t: Optional[float] = None) -> Wrench:
    c_t = model.c_t if c_t is None else c_t
    alpha = np.asarray(alpha, dtype=float)
    return forward_wrench(model, ActuatorState(omega=omega, alpha=alpha, alpha_cmd=alpha), c_t)


def _servo_rates(model: AllocationModel, W_vec: np.ndarray, W_dot_vec: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    T = model.A_pinv @ W_vec
    T_dot = model.A_pinv @ W_dot_vec
    t_l, t_v = T[0::2], T[1::2]
    td_l, td_v = T_dot[0::2], T_dot[1::2]
    magnitude_sq = t_l ** 2 + t_v ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = (t_l * td_v - t_v * td_l) / magnitude_sq
    return rates, np.sqrt(magnitude_sq)


def servo_rates_from_wrench_rate(model: AllocationModel, W, W_dot) -> np.ndarray:
    """Servo angle rates implied by moving the wrench at rate W_dot through W."""
    rates, magnitude = _servo_rates(model, _wrench_vector(W), _wrench_vector(W_dot))
    for i, thrust in enumerate(magnitude):
        if thrust <= model.epsilon_thrust:
            raise SingularConfigurationError(i, float(thrust))
    return rates


def max_implied_servo_rate(model: AllocationModel, wrenches: np.ndarray, rates: np.ndarray, thrust_floor: float = 0.1) -> float:
    """Largest |α̇| along a wrench trajectory, ignoring rotors below thrust_floor."""
    worst = 0.0
    for W_vec, W_dot_vec in zip(np.atleast_2d(wrenches), np.atleast_2d(rates)):
        alpha_dot, magnitude = _servo_rates(model, W_vec, W_dot_vec)
        active = magnitude > thrust_floor
        if np.any(active):
            worst = max(worst, float(np.max(np.abs(alpha_dot[active]))))
    return worst


def allocation_frames(model: AllocationModel) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Labeled copies of A and A† for CSV export."""
    labels = thrust_labels()
    A = pd.DataFrame(model.A, index=list(WRENCH_LABELS), columns=labels)
    A_pinv = pd.DataFrame(model.A_pinv, index=labels, columns=list(WRENCH_LABELS))
    return A, A_pinv
