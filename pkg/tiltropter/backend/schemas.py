import math
from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .core import VehicleParams, Wrench, x_frame_rotor_positions
from .dynamics_sim import ContactConfig, ImuNoiseConfig, WrenchPulse
from .nmpc import NmpcConfig
from .trajectory import FigureEight, HoverTrajectory, HybridMission, StepTrajectory, Trajectory

Vector3 = Tuple[float, float, float]
Vector6 = Tuple[float, float, float, float, float, float]


# Vehicle schemas
class VehicleConfig(BaseModel):
    """Vehicle parameterization in SI units; see config/vehicle_default.yaml for the documented defaults."""
    model_config = ConfigDict(extra="forbid")

    m: float = Field(1.5, gt=0)
    J: List[List[float]] = Field(default_factory=lambda: [[0.012, 0, 0], [0, 0.012, 0], [0, 0, 0.02]])
    c_t: float = Field(1.2e-5, gt=0)
    c_q: float = Field(1.9e-7, ge=0)
    arm_length: float = Field(0.15, gt=0)
    rotor_positions: Optional[List[Vector3]] = None
    arm_axes: Optional[List[Vector3]] = None
    spin_dirs: Tuple[int, int, int, int] = (1, 1, -1, -1)
    r_wheel: float = Field(0.1, gt=0)
    tau_servo: float = Field(0.05, gt=0)
    omega_max: float = Field(2500.0, gt=0)
    tau_rotor: float = Field(0.0, ge=0)
    alpha_range: Tuple[float, float] = (-math.pi, math.pi)
    alpha_rate_max: float = Field(8.0, gt=0)
    epsilon_thrust: float = Field(1e-4, gt=0)
    neglect_drag_torque: bool = False
    wheel_half_track: float = Field(0.15, gt=0)

    @model_validator(mode="after")
    def check_geometry(self):
        # VehicleParams raises ParameterError (a ValueError) on SPD/rank/unit-axis violations.
        self.to_params()
        return self

    def to_params(self) -> VehicleParams:
        kwargs: Dict[str, Any] = dict(
            m=self.m,
            J=np.array(self.J, dtype=float),
            c_t=self.c_t,
            c_q=self.c_q,
            spin_dirs=self.spin_dirs,
            r_wheel=self.r_wheel,
            tau_servo=self.tau_servo,
            omega_max=self.omega_max,
            tau_rotor=self.tau_rotor,
            alpha_range=self.alpha_range,
            alpha_rate_max=self.alpha_rate_max,
            epsilon_thrust=self.epsilon_thrust,
            neglect_drag_torque=self.neglect_drag_torque,
            wheel_half_track=self.wheel_half_track,
        )
        if self.rotor_positions is not None:
            kwargs["rotor_positions"] = np.array(self.rotor_positions, dtype=float)
        else:
            kwargs["rotor_positions"] = x_frame_rotor_positions(self.arm_length)
        if self.arm_axes is not None:
            kwargs["arm_axes"] = np.array(self.arm_axes, dtype=float)
        return VehicleParams(**kwargs)

    @classmethod
    def from_yaml(cls, path: str) -> "VehicleConfig":
        with open(path, "r") as f:
            return cls.model_validate(yaml.safe_load(f) or {})


# Controller schemas
class NmpcConfigModel(BaseModel):
    """NMPC weights by block; the stage error order is wrench, position, velocity, attitude, rate."""
    model_config = ConfigDict(extra="forbid")

    N: int = Field(20, ge=2)
    dt: float = Field(0.1, gt=0)
    q_force: Vector3 = (0.05, 0.05, 0.05)
    q_torque: Vector3 = (0.1, 0.1, 0.1)
    q_position: Vector3 = (80.0, 80.0, 120.0)
    q_velocity: Vector3 = (10.0, 10.0, 10.0)
    q_attitude: Vector3 = (60.0, 60.0, 60.0)
    q_rate: Vector3 = (5.0, 5.0, 5.0)
    terminal_scale: float = Field(10.0, ge=0)
    r: Vector6 = (2.0, 2.0, 2.0, 2.0, 2.0, 2.0)
    u_max: Vector6 = (2.0, 2.0, 2.0, 2.0, 2.0, 2.0)
    W_min: Vector6 = (-0.2, -0.2, 0.0, -20.0, -20.0, -20.0)
    W_max: Vector6 = (0.2, 0.2, 20.0, 20.0, 20.0, 20.0)
    omega_max: Vector3 = (2.0, 2.0, 1.5)
    contact_tol: float = Field(0.02, gt=0)
    max_iter: int = Field(30, ge=1)
    kkt_tol: float = Field(1e-6, gt=0)
    stage0_tol: float = Field(1e-3, gt=0)

    @field_validator("q_force", "q_torque", "q_position", "q_velocity", "q_attitude", "q_rate")
    @classmethod
    def nonnegative_weights(cls, value):
        if min(value) < 0:
            raise ValueError("State weights must be nonnegative")
        return value

    @field_validator("r", "u_max")
    @classmethod
    def positive_entries(cls, value):
        if min(value) <= 0:
            raise ValueError("Input weights and rate bounds must be positive")
        return value

    @model_validator(mode="after")
    def check_bounds(self):
        if any(lo > hi for lo, hi in zip(self.W_min, self.W_max)):
            raise ValueError("W_min must not exceed W_max")
        return self

    def to_config(self, dt_ctrl: float = 0.01) -> NmpcConfig:
        s = self.terminal_scale
        Q = self.q_force + self.q_torque + self.q_position + self.q_velocity + self.q_attitude + self.q_rate
        tracked = tuple(s * w for w in self.q_position + self.q_velocity + self.q_attitude)
        Q_N = self.q_force + self.q_torque + tracked + self.q_rate
        return NmpcConfig(
            N=self.N,
            dt=self.dt,
            Q=tuple(Q),
            Q_N=tuple(Q_N),
            R=tuple(self.r),
            u_max=tuple(self.u_max),
            W_min=tuple(self.W_min),
            W_max=tuple(self.W_max),
            omega_max=tuple(self.omega_max),
            contact_tol=self.contact_tol,
            max_iter=self.max_iter,
            kkt_tol=self.kkt_tol,
            dt_ctrl=dt_ctrl,
            stage0_tol=self.stage0_tol,
        )


class EstimatorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    k_force: float = Field(10.0, gt=0)
    k_torque: float = Field(10.0, gt=0)
    compensate_servo: bool = True


class SensorNoiseConfig(BaseModel):
    """IMU, ESC telemetry and state-feed noise (standard deviations)."""
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    accel_std: float = Field(0.05, ge=0)
    gyro_std: float = Field(0.005, ge=0)
    esc_rel_std: float = Field(0.005, ge=0)
    position_std: float = Field(0.001, ge=0)
    velocity_std: float = Field(0.002, ge=0)
    attitude_std: float = Field(0.001, ge=0)
    rate_std: float = Field(0.002, ge=0)

    def imu(self) -> ImuNoiseConfig:
        return ImuNoiseConfig(enabled=self.enabled, accel_std=self.accel_std, gyro_std=self.gyro_std)


class ContactConfigModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_p: float = Field(400.0, gt=0)
    k_d: float = Field(40.0, ge=0)
    mu: float = Field(0.8, gt=0)
    contact_tol: float = Field(2e-3, gt=0)
    ground_enabled: bool = True

    def to_contact(self) -> ContactConfig:
        return ContactConfig(**self.model_dump())


class PowerConfig(BaseModel):
    """Induced-power proxy: calibrated so an equal-split hover draws p_hover watts."""
    model_config = ConfigDict(extra="forbid")

    p_hover: float = Field(650.0, gt=0)
    p_base: float = Field(8.0, ge=0)
    air_density: float = Field(1.225, gt=0)
    rotor_radius: float = Field(0.1, gt=0)


# Trajectory schemas
class FigureEightSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    center: Tuple[float, float] = (0.0, 0.0)
    half_width: float = Field(2.0, gt=0)
    half_height: float = Field(1.0, gt=0)
    altitude: float = 1.0
    v_max: float = Field(1.5, gt=0)
    a_max: float = Field(1.5, gt=0)
    vertical_amplitude: float = 0.25
    laps: float = Field(1.0, gt=0)
    heading: Literal["tangent", "constant"] = "tangent"
    attitude: Literal["flat", "level"] = "flat"
    yaw: float = 0.0

    def build(self, ground: bool = False, r_wheel: Optional[float] = None) -> FigureEight:
        params = self.model_dump()
        if ground:
            params["altitude"] = r_wheel
        return FigureEight(ground=ground, **params)


class TrajectorySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["hover", "step", "figure_eight", "ground_figure_eight", "hybrid"] = "hover"
    position: Vector3 = (0.0, 0.0, 1.0)
    target: Optional[Vector3] = None
    step_time: float = Field(0.0, ge=0)
    yaw: float = 0.0
    duration: float = Field(10.0, gt=0)
    figure_eight: Optional[FigureEightSpec] = None
    aerial: Optional[FigureEightSpec] = None
    ground: Optional[FigureEightSpec] = None
    transition_duration: float = Field(3.0, ge=1.0)

    @model_validator(mode="after")
    def check_segments(self):
        if self.type == "step" and self.target is None:
            raise ValueError("A step trajectory needs a target")
        if self.type == "hybrid" and (self.aerial is None or self.ground is None):
            raise ValueError("A hybrid trajectory needs both aerial and ground segments")
        return self

    def build(self, r_wheel: float) -> Trajectory:
        if self.type == "hover":
            return HoverTrajectory(self.position, yaw=self.yaw, duration=self.duration, r_wheel=r_wheel)
        if self.type == "step":
            return StepTrajectory(self.position, self.target, self.step_time, self.duration, self.yaw)
        if self.type == "figure_eight":
            return (self.figure_eight or FigureEightSpec()).build()
        if self.type == "ground_figure_eight":
            return (self.figure_eight or FigureEightSpec(v_max=0.5, a_max=0.15)).build(ground=True, r_wheel=r_wheel)
        aerial = self.aerial.build()
        ground = self.ground.build(ground=True, r_wheel=r_wheel)
        return HybridMission(aerial, ground, self.transition_duration, r_wheel)


class DisturbanceSpec(BaseModel):
    """Body-frame wrench injected on [start, end)."""
    model_config = ConfigDict(extra="forbid")

    start: float = Field(0.0, ge=0)
    end: Optional[float] = None
    force: Vector3 = (0.0, 0.0, 0.0)
    torque: Vector3 = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def check_window(self):
        if self.end is not None and self.end <= self.start:
            raise ValueError("Disturbance window must end after it starts")
        return self

    def to_pulse(self) -> WrenchPulse:
        end = np.inf if self.end is None else self.end
        return WrenchPulse(Wrench(np.array(self.force), np.array(self.torque)), self.start, end)


# Scenario schema
class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    vehicle: VehicleConfig = Field(default_factory=VehicleConfig)
    nmpc: NmpcConfigModel = Field(default_factory=NmpcConfigModel)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    noise: SensorNoiseConfig = Field(default_factory=SensorNoiseConfig)
    contact: ContactConfigModel = Field(default_factory=ContactConfigModel)
    power: PowerConfig = Field(default_factory=PowerConfig)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    disturbances: List[DisturbanceSpec] = Field(default_factory=list)
    initial_state: Literal["auto", "hover", "ground"] = "auto"
    dt_sim: float = Field(0.001, gt=0, le=0.01)
    dt_ctrl: float = Field(0.01, gt=0)
    duration: Optional[float] = Field(None, gt=0)
    seed: int = 0
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def check_timing(self):
        ratio = self.dt_ctrl / self.dt_sim
        if ratio < 1.0 - 1e-9 or abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"dt_ctrl={self.dt_ctrl} must be an integer multiple of dt_sim={self.dt_sim}")
        if self.duration is not None and self.duration + 1e-9 < self.build_trajectory().duration:
            raise ValueError(f"duration={self.duration} s is shorter than the trajectory")
        return self

    def build_trajectory(self) -> Trajectory:
        return self.trajectory.build(self.vehicle.r_wheel)

    def run_duration(self) -> float:
        return self.duration if self.duration is not None else self.build_trajectory().duration

    def nmpc_config(self) -> NmpcConfig:
        return self.nmpc.to_config(self.dt_ctrl)


def load_scenario(path: str) -> ScenarioConfig:
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    return ScenarioConfig.model_validate(data)


def dump_scenario(cfg: ScenarioConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


# API schemas
class ScenarioRunCreate(BaseModel):
    scenario: ScenarioConfig


class ScenarioRun(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    id: int
    name: str
    seed: int
    status: str
    metrics: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    output_dir: Optional[str] = None
    created_at: datetime
    started_at: Optional[datetime] = None
    completed_at: Optional[datetime] = None


class AllocationOut(BaseModel):
    wrench_labels: List[str]
    thrust_labels: List[str]
    A: List[List[float]]
    A_pinv: List[List[float]]
    singular_values: List[float]
