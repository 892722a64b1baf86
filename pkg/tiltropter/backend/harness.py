"""
Closed-loop scenario runner.

Each control tick samples the reference horizon, runs the NMPC, allocates the wrench
command to rotor speeds and tilt angles, advances the plant at dt_sim and feeds the
simulated IMU and rotor telemetry to the wrench estimator.
"""
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from .allocation import (
    AllocationModel,
    build_allocation,
    extract_commands,
    forward_wrench,
    inverse_allocate,
    max_implied_servo_rate,
)
from .core import ActuatorCommand, ActuatorState, RigidBodyState, VehicleParams, Wrench, quat_exp, quat_multiply
from .dynamics_sim import (
    SIM_LOG_COLUMNS,
    ContactConfig,
    DisturbanceSchedule,
    PlantSimulator,
    PlantState,
    plant_record,
    sample_imu,
)
from .errors import InvalidArgumentError, SimulationDivergedError, SolverError
from .nmpc import NmpcController, assemble_state
from .schemas import ScenarioConfig, dump_scenario
from .trajectory import PHASE_AERIAL, PHASE_GROUND, PHASES, ReferencePoint, sample_horizon
from .wrench_est import WrenchEstimator

logger = logging.getLogger(__name__)

REFERENCE_COLUMNS = ["pr_x", "pr_y", "pr_z", "phase", "ref_contact", "power", "v_By", "gap", "Fcmd_z"]
STATE_COLUMNS = (
    ["xF_x", "xF_y", "xF_z", "xM_x", "xM_y", "xM_z", "xp_x", "xp_y", "xp_z", "xv_x", "xv_y", "xv_z"]
    + ["xq_w", "xq_x", "xq_y", "xq_z", "xw_x", "xw_y", "xw_z"]
)
NMPC_LOG_COLUMNS = (
    ["t"]
    + STATE_COLUMNS
    + ["Wcmd_F_x", "Wcmd_F_y", "Wcmd_F_z", "Wcmd_M_x", "Wcmd_M_y", "Wcmd_M_z"]
    + ["u_Fdot_x", "u_Fdot_y", "u_Fdot_z", "u_Mdot_x", "u_Mdot_y", "u_Mdot_z"]
    + ["kkt_residual", "iterations", "status", "active_stages", "solve_time", "max_servo_rate"]
)
ESTIMATOR_LOG_COLUMNS = (
    ["t", "Fhat_x", "Fhat_y", "Fhat_z", "Mhat_x", "Mhat_y", "Mhat_z"]
    + ["F_true_x", "F_true_y", "F_true_z", "M_true_x", "M_true_y", "M_true_z"]
    + [f"alpha_hat_{i}" for i in range(1, 5)]
    + [f"alpha_act_{i}" for i in range(1, 5)]
    + ["saturated"]
)
TIMING_FIELDS = ("solve_time_mean", "solve_time_max")


# --- Power proxy ---

@dataclass(frozen=True)
class PowerModel:
    """Ideal induced power Σ κ T^1.5 / √(2ρA) plus a constant electronics draw."""
    kappa: float
    air_density: float = 1.225
    disk_area: float = np.pi * 0.1 ** 2
    p_base: float = 8.0

    @classmethod
    def calibrated(
        cls,
        params: VehicleParams,
        p_hover: float = 650.0,
        p_base: float = 8.0,
        air_density: float = 1.225,
        rotor_radius: float = 0.1,
    ) -> "PowerModel":
        if p_hover <= p_base:
            raise InvalidArgumentError(f"Hover power {p_hover} W must exceed the base draw {p_base} W")
        area = np.pi * rotor_radius ** 2
        per_rotor = params.weight / 4.0
        induced = 4.0 * per_rotor ** 1.5 / np.sqrt(2.0 * air_density * area)
        return cls(kappa=(p_hover - p_base) / induced, air_density=air_density, disk_area=area, p_base=p_base)

    def power(self, thrusts) -> float:
        thrusts = np.clip(np.asarray(thrusts, dtype=float), 0.0, None)
        induced = np.sum(thrusts ** 1.5) / np.sqrt(2.0 * self.air_density * self.disk_area)
        return float(self.kappa * induced + self.p_base)


def power_proxy(actuators: ActuatorState, params: VehicleParams, model: Optional[PowerModel] = None) -> float:
    model = model or PowerModel.calibrated(params)
    return model.power(params.c_t * actuators.omega ** 2)


# --- Metrics ---

@dataclass
class RunMetrics:
    rmse_position: float
    rmse_per_phase: Dict[str, float] = field(default_factory=dict)
    mean_power_aerial: Optional[float] = None
    mean_power_ground: Optional[float] = None
    power_ratio: Optional[float] = None
    max_v_By: float = 0.0
    max_omega_x: float = 0.0
    max_height_error: float = 0.0
    mean_ground_Fz: Optional[float] = None
    contact_events: int = 0
    max_servo_rate: float = 0.0
    estimator_force_error_mean: float = 0.0
    estimator_force_error_max: float = 0.0
    estimator_torque_error_max: float = 0.0
    solve_time_mean: float = 0.0
    solve_time_max: float = 0.0
    samples: int = 0
    failed: bool = False
    failure: Optional[str] = None

    def to_dict(self, include_timing: bool = True) -> Dict:
        data = asdict(self)
        if not include_timing:
            for name in TIMING_FIELDS:
                data.pop(name)
        return data


@dataclass
class RunLogs:
    sim: pd.DataFrame
    nmpc: Optional[pd.DataFrame] = None
    estimator: Optional[pd.DataFrame] = None

    @classmethod
    def load(cls, sim_csv: str) -> "RunLogs":
        """Read `<name>_sim.csv` and, when present, its `_nmpc` and `_estimator` siblings."""
        if not sim_csv.endswith("_sim.csv"):
            raise InvalidArgumentError(f"Expected a '<name>_sim.csv' log, got {sim_csv}")
        stem = sim_csv[: -len("_sim.csv")]
        frames = {}
        for part in ("nmpc", "estimator"):
            path = f"{stem}_{part}.csv"
            frames[part] = pd.read_csv(path) if os.path.exists(path) else None
        return cls(sim=pd.read_csv(sim_csv), **frames)


def _max_abs(frame: pd.DataFrame, column: str) -> float:
    if column not in frame.columns or frame.empty:
        return 0.0
    return float(frame[column].abs().max())


def compute_metrics(logs) -> RunMetrics:
    """RMSE, phase-split power means and ground-phase residuals, phases taken from the reference."""
    if isinstance(logs, pd.DataFrame):
        logs = RunLogs(sim=logs)
    sim = logs.sim
    if sim is None or sim.empty:
        raise InvalidArgumentError("Cannot compute metrics from an empty log")

    err = sim[["p_x", "p_y", "p_z"]].to_numpy() - sim[["pr_x", "pr_y", "pr_z"]].to_numpy()
    sq = np.sum(err ** 2, axis=1)
    metrics = RunMetrics(rmse_position=float(np.sqrt(np.mean(sq))), samples=int(len(sim)))

    if "phase" in sim.columns:
        phase = sim["phase"].astype(str).to_numpy()
    elif "ref_contact" in sim.columns:
        phase = np.where(sim["ref_contact"].astype(bool), PHASE_GROUND, PHASE_AERIAL)
    else:
        phase = np.full(len(sim), PHASE_AERIAL)
    for name in PHASES:
        mask = phase == name
        if np.any(mask):
            metrics.rmse_per_phase[name] = float(np.sqrt(np.mean(sq[mask])))

    aerial, ground = phase == PHASE_AERIAL, phase == PHASE_GROUND
    if "power" in sim.columns:
        if np.any(aerial):
            metrics.mean_power_aerial = float(sim["power"][aerial].mean())
        if np.any(ground):
            metrics.mean_power_ground = float(sim["power"][ground].mean())
        if metrics.mean_power_aerial and metrics.mean_power_ground is not None:
            metrics.power_ratio = metrics.mean_power_ground / metrics.mean_power_aerial

    if np.any(ground):
        ground_rows = sim[ground]
        metrics.max_v_By = _max_abs(ground_rows, "v_By")
        metrics.max_omega_x = _max_abs(ground_rows, "w_x")
        metrics.max_height_error = _max_abs(ground_rows, "gap")
        if "Fcmd_z" in sim.columns:
            metrics.mean_ground_Fz = float(ground_rows["Fcmd_z"].mean())
    if "contact" in sim.columns:
        contact = sim["contact"].astype(float).to_numpy()
        metrics.contact_events = int(np.count_nonzero(np.diff(contact)))

    if logs.nmpc is not None and not logs.nmpc.empty:
        metrics.solve_time_mean = float(logs.nmpc["solve_time"].mean())
        metrics.solve_time_max = float(logs.nmpc["solve_time"].max())
        metrics.max_servo_rate = _max_abs(logs.nmpc, "max_servo_rate")
    if logs.estimator is not None and not logs.estimator.empty:
        est = logs.estimator
        f_err = np.linalg.norm(
            est[["Fhat_x", "Fhat_y", "Fhat_z"]].to_numpy() - est[["F_true_x", "F_true_y", "F_true_z"]].to_numpy(), axis=1
        )
        m_err = np.linalg.norm(
            est[["Mhat_x", "Mhat_y", "Mhat_z"]].to_numpy() - est[["M_true_x", "M_true_y", "M_true_z"]].to_numpy(), axis=1
        )
        metrics.estimator_force_error_mean = float(np.mean(f_err))
        metrics.estimator_force_error_max = float(np.max(f_err))
        metrics.estimator_torque_error_max = float(np.max(m_err))
    return metrics


# --- Scenario runner ---

@dataclass
class ScenarioResult:
    metrics: RunMetrics
    logs: RunLogs
    output_dir: Optional[str] = None


def hover_command(model: AllocationModel, params: VehicleParams) -> ActuatorCommand:
    hover = Wrench(np.array([0.0, 0.0, params.weight]), np.zeros(3))
    return extract_commands(inverse_allocate(model, hover), params.c_t, params.omega_max, epsilon_thrust=params.epsilon_thrust)


def initial_plant_state(params: VehicleParams, model: AllocationModel, ref: ReferencePoint, mode: str = "auto") -> PlantState:
    """At rest on the wheels for ground starts, hovering at the first reference point otherwise."""
    if mode == "ground" or (mode == "auto" and ref.contact):
        body = RigidBodyState(p=np.array([ref.p[0], ref.p[1], params.r_wheel]), v=np.zeros(3), q=ref.q, omega=np.zeros(3))
        return PlantState(body=body, actuators=ActuatorState.idle(), contact_active=True)
    cmd = hover_command(model, params)
    actuators = ActuatorState(omega=cmd.omega, alpha=cmd.alpha, alpha_cmd=cmd.alpha)
    body = RigidBodyState(p=ref.p, v=np.zeros(3), q=ref.q, omega=np.zeros(3))
    return PlantState(body=body, actuators=actuators, applied_wrench=forward_wrench(model, actuators, params.c_t))


def _noisy_body(body: RigidBodyState, cfg: ScenarioConfig, rng: np.random.Generator) -> RigidBodyState:
    noise = cfg.noise
    if not noise.enabled:
        return body
    q = quat_multiply(body.q, quat_exp(rng.normal(0.0, noise.attitude_std, 3)))
    return RigidBodyState(
        p=body.p + rng.normal(0.0, noise.position_std, 3),
        v=body.v + rng.normal(0.0, noise.velocity_std, 3),
        q=q / np.linalg.norm(q),
        omega=body.omega + rng.normal(0.0, noise.rate_std, 3),
    )


def run_scenario(cfg: ScenarioConfig, output_dir: Optional[str] = None) -> ScenarioResult:
    """Run one scenario; solver failure or divergence ends the run with partial logs and a failure record."""
    params = cfg.vehicle.to_params()
    model = build_allocation(params)
    nmpc_cfg = cfg.nmpc_config()
    traj = cfg.build_trajectory()
    duration = cfg.run_duration()
    rng = np.random.default_rng(cfg.seed)
    power_model = PowerModel.calibrated(params, **cfg.power.model_dump())
    disturbance = DisturbanceSchedule([d.to_pulse() for d in cfg.disturbances])

    initial = initial_plant_state(params, model, traj.evaluate(0.0), cfg.initial_state)
    sim = PlantSimulator(
        params,
        initial,
        dt_sim=cfg.dt_sim,
        contact=cfg.contact.to_contact(),
        disturbance=disturbance if disturbance else None,
        model=model,
        record=False,
    )
    controller = NmpcController(nmpc_cfg, params)
    estimator = WrenchEstimator(
        model,
        params,
        k_force=cfg.estimator.k_force,
        k_torque=cfg.estimator.k_torque,
        compensate_servo=cfg.estimator.compensate_servo,
        alpha0=initial.actuators.alpha,
    )

    logger.info(f"Starting scenario '{cfg.name}' ({cfg.trajectory.type}, {duration:.2f} s, seed {cfg.seed})")
    W_cmd = initial.applied_wrench
    previous_alpha = initial.actuators.alpha
    imu_noise = cfg.noise.imu()
    n_ticks = int(round(duration / cfg.dt_ctrl))
    sim_rows: List[list] = []
    nmpc_rows: List[list] = []
    est_rows: List[list] = []
    failure: Optional[str] = None
    phase = None

    for k in range(n_ticks):
        t = k * cfg.dt_ctrl
        before = sim.state
        try:
            refs = sample_horizon(traj, t, nmpc_cfg.N, nmpc_cfg.dt)
            if refs[0].phase != phase:
                phase = refs[0].phase
                logger.info(f"Phase '{phase}' at t={t:.2f} s")
            x_est = assemble_state(W_cmd, _noisy_body(before.body, cfg, rng))
            w_ext = estimator.state.estimate if cfg.estimator.enabled else before.external_wrench
            W_cmd, solution = controller.step(x_est, refs, w_ext.as_vector())
            cmd = extract_commands(
                inverse_allocate(model, W_cmd), params.c_t, params.omega_max, previous_alpha, params.epsilon_thrust
            )
            if cmd.held_rotors:
                logger.warning(f"Tilt held at zero thrust on rotors {[i + 1 for i in cmd.held_rotors]} at t={t:.2f} s")
            if cmd.saturated:
                logger.info(f"Rotor speed saturation on rotors {[i + 1 for i in cmd.saturated_rotors]} at t={t:.2f} s")
            previous_alpha = cmd.alpha
            after = sim.advance(cmd, cfg.dt_ctrl)
        except (SolverError, SimulationDivergedError) as exc:
            failure = f"{type(exc).__name__} at t={t:.3f} s: {exc}"
            logger.error(f"Scenario '{cfg.name}' aborted; logs up to t={t:.3f} s are kept. {failure}")
            break

        servo_rate = max_implied_servo_rate(model, solution.states[:-1, 0:6], solution.inputs)
        nmpc_rows.append(
            [t, *x_est, *W_cmd.as_vector(), *solution.inputs[0], solution.kkt_residual, solution.iterations,
             solution.status, solution.active_stages, solution.solve_time, servo_rate]
        )

        imu = sample_imu(before.body, after.body, cfg.dt_ctrl, imu_noise, rng, after.t)
        omega_meas = after.actuators.omega
        if cfg.noise.enabled and cfg.noise.esc_rel_std > 0.0:
            omega_meas = omega_meas * (1.0 + rng.normal(0.0, cfg.noise.esc_rel_std, 4))
        estimate = estimator.update(imu, omega_meas, after.actuators.alpha_cmd, cfg.dt_ctrl)
        est_rows.append(
            [after.t, *estimate.as_vector(), *after.external_wrench.as_vector(),
             *estimator.state.alpha_hat, *after.actuators.alpha, float(estimator.state.saturated)]
        )

        ref = traj.evaluate(after.t)
        v_body = after.body.body_velocity
        sim_rows.append(
            plant_record(after)
            + [*ref.p, ref.phase, float(ref.contact), power_model.power(params.c_t * after.actuators.omega ** 2),
               float(v_body[1]), float(after.body.p[2] - params.r_wheel), float(W_cmd.F[2])]
        )

    logs = RunLogs(
        sim=pd.DataFrame(sim_rows, columns=SIM_LOG_COLUMNS + REFERENCE_COLUMNS),
        nmpc=pd.DataFrame(nmpc_rows, columns=NMPC_LOG_COLUMNS),
        estimator=pd.DataFrame(est_rows, columns=ESTIMATOR_LOG_COLUMNS),
    )
    metrics = compute_metrics(logs) if sim_rows else RunMetrics(rmse_position=0.0)
    if failure is not None:
        metrics.failed = True
        metrics.failure = failure
    logger.info(
        f"Finished scenario '{cfg.name}': rmse={metrics.rmse_position:.4f} m, "
        f"power ratio={metrics.power_ratio}, contact events={metrics.contact_events}"
    )

    output_dir = output_dir or cfg.output_dir
    if output_dir:
        write_run_outputs(cfg, metrics, logs, output_dir)
    return ScenarioResult(metrics=metrics, logs=logs, output_dir=output_dir)


# --- Outputs ---

def write_metrics(metrics: RunMetrics, path: str) -> None:
    # Wall-clock timing is left out so seeded reruns write identical files.
    with open(path, "w") as f:
        yaml.safe_dump(metrics.to_dict(include_timing=False), f, sort_keys=False)


def series_frame(sim: pd.DataFrame) -> pd.DataFrame:
    """Plot-ready subset: time, position, reference, phase, power and tracking error."""
    series = sim[["t", "p_x", "p_y", "p_z", "pr_x", "pr_y", "pr_z", "phase", "power"]].copy()
    err = sim[["p_x", "p_y", "p_z"]].to_numpy() - sim[["pr_x", "pr_y", "pr_z"]].to_numpy()
    series["error"] = np.linalg.norm(err, axis=1)
    return series


def write_run_outputs(cfg: ScenarioConfig, metrics: RunMetrics, logs: RunLogs, output_dir: str) -> Dict[str, str]:
    os.makedirs(output_dir, exist_ok=True)
    paths = {
        "sim": os.path.join(output_dir, f"{cfg.name}_sim.csv"),
        "nmpc": os.path.join(output_dir, f"{cfg.name}_nmpc.csv"),
        "estimator": os.path.join(output_dir, f"{cfg.name}_estimator.csv"),
        "series": os.path.join(output_dir, f"{cfg.name}_series.csv"),
        "metrics": os.path.join(output_dir, f"{cfg.name}_metrics.yaml"),
        "scenario": os.path.join(output_dir, f"{cfg.name}_scenario.yaml"),
    }
    logs.sim.to_csv(paths["sim"], index=False)
    logs.nmpc.to_csv(paths["nmpc"], index=False)
    logs.estimator.to_csv(paths["estimator"], index=False)
    series_frame(logs.sim).to_csv(paths["series"], index=False)
    write_metrics(metrics, paths["metrics"])
    with open(paths["scenario"], "w") as f:
        f.write(dump_scenario(cfg))
    logger.info(f"Wrote run outputs for '{cfg.name}' to {output_dir}")
    return paths


# --- Servo-compensation study ---

@dataclass(frozen=True)
class TiltTransientResult:
    peak_error_compensated: float
    peak_error_uncompensated: float

    @property
    def improvement(self) -> float:
        """Relative reduction of the peak estimate error obtained by modeling the servo lag."""
        if self.peak_error_uncompensated <= 0.0:
            return 0.0
        return 1.0 - self.peak_error_compensated / self.peak_error_uncompensated


def run_tilt_transient(
    params: Optional[VehicleParams] = None,
    delta: float = 0.6,
    t_step: float = 0.1,
    duration: float = 0.5,
    dt_sim: float = 1e-3,
    dt_ctrl: float = 0.01,
    k_force: float = 10.0,
    k_torque: float = 10.0,
) -> TiltTransientResult:
    """
    Open-loop tilt step of ±delta on rotors 1 and 3 from hover, in free air.

    Two estimators watch the same flight: one reconstructs the tilt through the servo
    model, the other trusts the commanded angles. The true external wrench is zero.
    """
    params = params or VehicleParams()
    model = build_allocation(params)
    hover = hover_command(model, params)
    actuators = ActuatorState(omega=hover.omega, alpha=hover.alpha, alpha_cmd=hover.alpha)
    initial = PlantState(body=RigidBodyState.at_rest(p=(0.0, 0.0, 5.0)), actuators=actuators)
    sim = PlantSimulator(
        params, initial, dt_sim=dt_sim, contact=ContactConfig(ground_enabled=False), model=model, record=False
    )

    tilted_alpha = np.array(hover.alpha)
    tilted_alpha[0] += delta
    tilted_alpha[2] -= delta
    tilted = ActuatorCommand(omega=hover.omega, alpha=tilted_alpha)

    estimators = {
        True: WrenchEstimator(model, params, k_force, k_torque, compensate_servo=True, alpha0=hover.alpha),
        False: WrenchEstimator(model, params, k_force, k_torque, compensate_servo=False, alpha0=hover.alpha),
    }
    peaks = {True: 0.0, False: 0.0}
    for k in range(int(round(duration / dt_ctrl))):
        cmd = tilted if k * dt_ctrl >= t_step - 1e-12 else hover
        before = sim.state
        after = sim.advance(cmd, dt_ctrl)
        imu = sample_imu(before.body, after.body, dt_ctrl, timestamp=after.t)
        truth = after.external_wrench.as_vector()
        for compensate, estimator in estimators.items():
            estimate = estimator.update(imu, after.actuators.omega, cmd.alpha, dt_ctrl)
            peaks[compensate] = max(peaks[compensate], float(np.linalg.norm(estimate.as_vector() - truth)))

    result = TiltTransientResult(peak_error_compensated=peaks[True], peak_error_uncompensated=peaks[False])
    logger.info(
        f"Tilt transient ±{delta} rad: peak error {result.peak_error_compensated:.4f} with servo model, "
        f"{result.peak_error_uncompensated:.4f} without ({100 * result.improvement:.1f}% lower)"
    )
    return result
