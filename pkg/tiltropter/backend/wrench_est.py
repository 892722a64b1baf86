"""
Momentum-based external wrench estimation and servo time-constant identification.

The applied wrench is rebuilt from measured rotor speeds and servo angles reconstructed
through the identified first-order servo model, so the estimator never needs servo
encoders. Each channel behaves as a first-order low-pass filter of the true external
wrench with corner K.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar

from .allocation import AllocationModel, forward_wrench_from_angles
from .core import VehicleParams, Wrench
from .dynamics_sim import ImuSample
from .errors import IdentificationError, InvalidArgumentError

logger = logging.getLogger(__name__)

TORQUE_LIMIT = 10.0
TAU_BOUNDS = (1e-3, 1.0)
MIN_ID_SAMPLES = 20


def reconstruct_servo_angle(alpha_prev, alpha_cmd, dt: float, tau: float):
    """Exact zero-order-hold response of the first-order servo over dt."""
    if tau <= 0.0:
        raise InvalidArgumentError(f"Servo time constant must be positive, got {tau}")
    return alpha_cmd + (alpha_prev - alpha_cmd) * np.exp(-dt / tau)


def mean_servo_angle(alpha_prev, alpha_cmd, dt: float, tau: float):
    """Time average of the servo angle over an interval of length dt."""
    return alpha_cmd + (alpha_prev - alpha_cmd) * (tau / dt) * (1.0 - np.exp(-dt / tau))


def matched_gain(K: np.ndarray, dt: float) -> np.ndarray:
    """Discrete gain whose one-step update reproduces the continuous pole e^{-K dt}."""
    return (1.0 - np.exp(-np.diag(K) * dt)) / dt


@dataclass(frozen=True, eq=False)
class WrenchEstimatorState:
    """Estimates (body frame), diagonal gains (1/s), reconstructed servo angles and integrals."""
    F_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    M_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    K_f: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(3))
    K_m: np.ndarray = field(default_factory=lambda: 10.0 * np.eye(3))
    alpha_hat: np.ndarray = field(default_factory=lambda: np.full(4, np.pi / 2))
    integral_F: np.ndarray = field(default_factory=lambda: np.zeros(3))
    integral_M: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega_prev: Optional[np.ndarray] = None
    saturated: bool = False

    def __post_init__(self):
        for gain_name in ("K_f", "K_m"):
            gain = np.asarray(getattr(self, gain_name), dtype=float)
            if gain.shape != (3, 3) or not np.allclose(gain, np.diag(np.diag(gain))):
                raise InvalidArgumentError(f"{gain_name} must be a diagonal 3x3 matrix")
            if np.any(np.diag(gain) <= 0.0):
                raise InvalidArgumentError(f"{gain_name} diagonal entries must be positive")

    @classmethod
    def initial(
        cls,
        k_force: float = 10.0,
        k_torque: float = 10.0,
        alpha0=None,
        omega0=None,
        params: Optional[VehicleParams] = None,
    ) -> "WrenchEstimatorState":
        alpha0 = np.full(4, np.pi / 2) if alpha0 is None else np.asarray(alpha0, dtype=float)
        integral_M = np.zeros(3)
        omega_prev = None
        if omega0 is not None and params is not None:
            omega_prev = np.asarray(omega0, dtype=float)
            integral_M = params.J @ omega_prev
        return cls(
            K_f=k_force * np.eye(3),
            K_m=k_torque * np.eye(3),
            alpha_hat=alpha0,
            integral_M=integral_M,
            omega_prev=omega_prev,
        )

    def reset(self) -> "WrenchEstimatorState":
        return WrenchEstimatorState(K_f=self.K_f, K_m=self.K_m, alpha_hat=self.alpha_hat)

    @property
    def estimate(self) -> Wrench:
        return Wrench(self.F_hat, self.M_hat)


def update(
    est: WrenchEstimatorState,
    imu: ImuSample,
    omega_meas,
    alpha_cmd,
    dt: float,
    model: AllocationModel,
    params: VehicleParams,
    compensate_servo: bool = True,
) -> WrenchEstimatorState:
    """
    One estimator step over an interval of length dt.

    omega_meas and alpha_cmd are the rotor speeds and tilt commands held during the
    interval; imu is sampled at its end.
    """
    if dt <= 0.0:
        raise InvalidArgumentError(f"Estimator step must be positive, got {dt}")
    alpha_cmd = np.asarray(alpha_cmd, dtype=float)
    if compensate_servo:
        alpha_mean = mean_servo_angle(est.alpha_hat, alpha_cmd, dt, params.tau_servo)
        alpha_hat = reconstruct_servo_angle(est.alpha_hat, alpha_cmd, dt, params.tau_servo)
    else:
        alpha_mean = alpha_cmd
        alpha_hat = alpha_cmd.copy()
    applied = forward_wrench_from_angles(model, omega_meas, alpha_mean, params.c_t)

    kf = matched_gain(est.K_f, dt)
    km = matched_gain(est.K_m, dt)

    integral_F = est.integral_F + (params.m * imu.a_meas - applied.F - est.F_hat) * dt
    F_hat = kf * integral_F

    omega = np.asarray(imu.omega_meas, dtype=float)
    if est.omega_prev is None:
        # First sample: anchor the momentum integral at the current angular momentum.
        integral_M_prev = params.J @ omega
        omega_mid = omega
    else:
        integral_M_prev = est.integral_M
        omega_mid = 0.5 * (est.omega_prev + omega)
    momentum_mid = params.J @ omega_mid
    integral_M = integral_M_prev + (applied.M + np.cross(momentum_mid, omega_mid) + est.M_hat) * dt
    M_hat = km * (params.J @ omega - integral_M)

    force_limit = 10.0 * params.weight
    saturated = bool(np.any(np.abs(F_hat) > force_limit) or np.any(np.abs(M_hat) > TORQUE_LIMIT))
    if saturated:
        logger.warning(f"Wrench estimate clamped: F_hat={F_hat}, M_hat={M_hat}")
        F_hat = np.clip(F_hat, -force_limit, force_limit)
        M_hat = np.clip(M_hat, -TORQUE_LIMIT, TORQUE_LIMIT)
        integral_F = F_hat / kf
        integral_M = params.J @ omega - M_hat / km

    return replace(
        est,
        F_hat=F_hat,
        M_hat=M_hat,
        alpha_hat=alpha_hat,
        integral_F=integral_F,
        integral_M=integral_M,
        omega_prev=omega,
        saturated=saturated,
    )


class WrenchEstimator:
    """Stateful owner of a WrenchEstimatorState, stepped once per control tick."""

    def __init__(
        self,
        model: AllocationModel,
        params: VehicleParams,
        k_force: float = 10.0,
        k_torque: float = 10.0,
        compensate_servo: bool = True,
        alpha0=None,
    ):
        self.model = model
        self.params = params
        self.compensate_servo = compensate_servo
        self._k = (k_force, k_torque)
        self._alpha0 = alpha0
        self.state = WrenchEstimatorState.initial(k_force, k_torque, alpha0=alpha0)

    def reset(self) -> None:
        self.state = WrenchEstimatorState.initial(*self._k, alpha0=self._alpha0)

    def update(self, imu: ImuSample, omega_meas, alpha_cmd, dt: float) -> Wrench:
        self.state = update(
            self.state, imu, omega_meas, alpha_cmd, dt, self.model, self.params, self.compensate_servo
        )
        return self.state.estimate


# --- Servo identification ---

@dataclass(frozen=True, eq=False)
class ServoIdDataset:
    """Step-response record: timestamps (s), commanded and measured servo angles (rad)."""
    timestamp: np.ndarray
    command: np.ndarray
    measured_angle: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, name), dtype=float).reshape(-1) for name in ("timestamp", "command", "measured_angle")]
        if len({a.size for a in arrays}) != 1:
            raise IdentificationError("timestamp, command and measured_angle must have equal length")
        if arrays[0].size < MIN_ID_SAMPLES:
            raise IdentificationError(f"At least {MIN_ID_SAMPLES} samples are required, got {arrays[0].size}")
        if np.any(np.diff(arrays[0]) <= 0.0):
            raise IdentificationError("Timestamps must be strictly increasing")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise IdentificationError("Dataset contains non-finite values")
        for name, value in zip(("timestamp", "command", "measured_angle"), arrays):
            object.__setattr__(self, name, value)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "ServoIdDataset":
        missing = {"timestamp", "command", "measured_angle"} - set(frame.columns)
        if missing:
            raise IdentificationError(f"Servo dataset is missing columns: {sorted(missing)}")
        return cls(frame["timestamp"].to_numpy(), frame["command"].to_numpy(), frame["measured_angle"].to_numpy())

    @classmethod
    def from_csv(cls, path: str) -> "ServoIdDataset":
        return cls.from_frame(pd.read_csv(path))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"timestamp": self.timestamp, "command": self.command, "measured_angle": self.measured_angle})


@dataclass(frozen=True)
class ServoFit:
    tau: float
    rms_residual: float
    iterations: int


def simulate_servo_response(data: ServoIdDataset, tau: float) -> np.ndarray:
    """First-order response to the recorded (zero-order-hold) commands, from the first measurement."""
    response = np.empty_like(data.measured_angle)
    response[0] = data.measured_angle[0]
    decay = np.exp(-np.diff(data.timestamp) / tau)
    for k in range(len(decay)):
        response[k + 1] = data.command[k] + (response[k] - data.command[k]) * decay[k]
    return response


def identify_servo_tau(data: ServoIdDataset, bounds: Tuple[float, float] = TAU_BOUNDS) -> ServoFit:
    """Least-squares first-order time constant, searched on a log scale within bounds."""
    if np.ptp(data.command) < 1e-9:
        raise IdentificationError("Command signal is flat; the dataset carries no excitation")

    def cost(log_tau: float) -> float:
        residual = data.measured_angle - simulate_servo_response(data, np.exp(log_tau))
        return float(residual @ residual)

    result = minimize_scalar(
        cost,
        bounds=(np.log(bounds[0]), np.log(bounds[1])),
        method="bounded",
        options={"xatol": 1e-8},
    )
    tau = float(np.exp(result.x))
    rms = float(np.sqrt(result.fun / data.measured_angle.size))
    span = data.timestamp[-1] - data.timestamp[0]
    if span < 3.0 * tau:
        logger.warning(f"Dataset spans {span:.3f} s, less than three fitted time constants ({tau:.4f} s)")
    logger.info(f"Identified servo time constant tau={tau:.5f} s (rms residual {rms:.4e} rad)")
    return ServoFit(tau=tau, rms_residual=rms, iterations=int(result.nfev))


def synthesize_servo_dataset(
    tau: float,
    noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    dt: float = 0.002,
    duration: float = 0.5,
    step_time: float = 0.05,
    amplitude: float = 1.0,
) -> ServoIdDataset:
    """Step-response record of an ideal first-order servo, optionally with gaussian noise."""
    timestamp = np.arange(0.0, duration + 0.5 * dt, dt)
    command = np.where(timestamp >= step_time, amplitude, 0.0)
    ideal = ServoIdDataset(timestamp, command, np.zeros_like(timestamp))
    measured = simulate_servo_response(ideal, tau)
    if noise_std > 0.0:
        rng = rng if rng is not None else np.random.default_rng()
        measured = measured + rng.normal(0.0, noise_std, measured.size)
    return ServoIdDataset(timestamp, command, measured)
