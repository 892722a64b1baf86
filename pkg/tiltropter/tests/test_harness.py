#!/usr/bin/env python3
import os
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np
import pandas as pd
import yaml

sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from tiltropter.backend.allocation import build_allocation
from tiltropter.backend.core import ActuatorState, VehicleParams
from tiltropter.backend.errors import InvalidArgumentError, SolverError
from tiltropter.backend.harness import (
    PowerModel,
    RunLogs,
    compute_metrics,
    hover_command,
    power_proxy,
    run_scenario,
    run_tilt_transient,
)
from tiltropter.backend.schemas import ScenarioConfig


def short_hover(**overrides):
    data = {
        "name": "short_hover",
        "trajectory": {"type": "hover", "position": [0.0, 0.0, 1.0], "duration": 0.2},
        "initial_state": "hover",
        "seed": 3,
    }
    data.update(overrides)
    return ScenarioConfig.model_validate(data)


class TestPowerProxy(unittest.TestCase):

    def setUp(self):
        self.params = VehicleParams()

    def test_calibrated_to_hover_power(self):
        cmd = hover_command(build_allocation(self.params), self.params)
        actuators = ActuatorState(omega=cmd.omega, alpha=cmd.alpha, alpha_cmd=cmd.alpha)
        self.assertAlmostEqual(power_proxy(actuators, self.params), 650.0, delta=1e-6)

    def test_idle_rotors_draw_base_power(self):
        model = PowerModel.calibrated(self.params, p_hover=650.0, p_base=8.0)
        self.assertAlmostEqual(model.power(np.zeros(4)), 8.0)

    def test_power_grows_as_thrust_to_three_halves(self):
        model = PowerModel.calibrated(self.params, p_base=0.0)
        low = model.power(np.full(4, 1.0))
        high = model.power(np.full(4, 4.0))
        self.assertAlmostEqual(high / low, 8.0, places=9)

    def test_hover_power_must_exceed_base(self):
        with self.assertRaises(InvalidArgumentError):
            PowerModel.calibrated(self.params, p_hover=5.0, p_base=8.0)


class TestMetrics(unittest.TestCase):
    """Metrics on hand-built logs"""

    def _log(self):
        return pd.DataFrame({
            "t": [0.01, 0.02, 0.03, 0.04],
            "p_x": [0.1, 0.0, 0.0, 1.0],
            "p_y": [0.0, 0.1, 0.0, 0.0],
            "p_z": [1.0, 1.0, 0.3, 0.1],
            "pr_x": [0.0, 0.0, 0.0, 1.0],
            "pr_y": [0.0, 0.0, 0.0, 0.0],
            "pr_z": [1.0, 1.0, 0.1, 0.1],
            "phase": ["aerial", "aerial", "ground", "ground"],
            "ref_contact": [0.0, 0.0, 1.0, 1.0],
            "power": [600.0, 700.0, 40.0, 60.0],
            "v_By": [0.5, 0.5, 0.01, -0.03],
            "w_x": [0.2, 0.0, 0.0, 0.02],
            "gap": [0.9, 0.9, 0.2, 0.0],
            "Fcmd_z": [14.7, 14.7, 2.0, 4.0],
            "contact": [0.0, 0.0, 1.0, 1.0],
        })

    def test_hand_computed_values(self):
        metrics = compute_metrics(self._log())
        self.assertAlmostEqual(metrics.rmse_position, np.sqrt(0.06 / 4))
        self.assertAlmostEqual(metrics.rmse_per_phase["aerial"], 0.1)
        self.assertAlmostEqual(metrics.rmse_per_phase["ground"], np.sqrt(0.02))
        self.assertAlmostEqual(metrics.mean_power_aerial, 650.0)
        self.assertAlmostEqual(metrics.mean_power_ground, 50.0)
        self.assertAlmostEqual(metrics.power_ratio, 50.0 / 650.0)
        self.assertAlmostEqual(metrics.max_v_By, 0.03)
        self.assertAlmostEqual(metrics.max_omega_x, 0.02)
        self.assertAlmostEqual(metrics.max_height_error, 0.2)
        self.assertAlmostEqual(metrics.mean_ground_Fz, 3.0)
        self.assertEqual(metrics.contact_events, 1)
        self.assertEqual(metrics.samples, 4)

    def test_estimator_errors(self):
        est = pd.DataFrame({
            "Fhat_x": [1.0, 0.0], "Fhat_y": [0.0, 0.0], "Fhat_z": [0.0, 3.0],
            "Mhat_x": [0.0, 0.0], "Mhat_y": [0.0, 0.0], "Mhat_z": [0.0, 0.5],
            "F_true_x": [0.0, 0.0], "F_true_y": [0.0, 0.0], "F_true_z": [0.0, 0.0],
            "M_true_x": [0.0, 0.0], "M_true_y": [0.0, 0.0], "M_true_z": [0.0, 0.0],
        })
        metrics = compute_metrics(RunLogs(sim=self._log(), estimator=est))
        self.assertAlmostEqual(metrics.estimator_force_error_mean, 2.0)
        self.assertAlmostEqual(metrics.estimator_force_error_max, 3.0)
        self.assertAlmostEqual(metrics.estimator_torque_error_max, 0.5)

    def test_empty_log_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            compute_metrics(pd.DataFrame())

    def test_timing_excluded_on_request(self):
        data = compute_metrics(self._log()).to_dict(include_timing=False)
        self.assertNotIn("solve_time_mean", data)
        self.assertIn("rmse_position", data)

    def test_log_name_checked(self):
        with self.assertRaises(InvalidArgumentError):
            RunLogs.load("run.csv")


class TestScenarioRuns(unittest.TestCase):
    """Closed-loop runs, kept short"""

    def test_short_hover_run_writes_outputs(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = run_scenario(short_hover(), output_dir=tmp)
            self.assertFalse(result.metrics.failed)
            self.assertEqual(result.metrics.samples, 20)
            self.assertLess(result.metrics.rmse_position, 0.05)
            for suffix in ("sim.csv", "nmpc.csv", "estimator.csv", "series.csv", "metrics.yaml", "scenario.yaml"):
                self.assertTrue(os.path.exists(os.path.join(tmp, f"short_hover_{suffix}")), suffix)
            with open(os.path.join(tmp, "short_hover_metrics.yaml")) as f:
                written = yaml.safe_load(f)
            self.assertNotIn("solve_time_max", written)
            reloaded = compute_metrics(RunLogs.load(os.path.join(tmp, "short_hover_sim.csv")))
            self.assertAlmostEqual(reloaded.rmse_position, result.metrics.rmse_position, places=9)

    def test_seeded_runs_are_identical(self):
        first = run_scenario(short_hover()).metrics.to_dict(include_timing=False)
        second = run_scenario(short_hover()).metrics.to_dict(include_timing=False)
        self.assertEqual(first, second)

    def test_solver_failure_keeps_partial_record(self):
        with patch("tiltropter.backend.harness.NmpcController.step", side_effect=SolverError("qp failed")):
            result = run_scenario(short_hover(noise={"enabled": False}))
        self.assertTrue(result.metrics.failed)
        self.assertIn("SolverError", result.metrics.failure)
        self.assertEqual(len(result.logs.sim), 0)

    def test_servo_compensation_reduces_transient_error(self):
        result = run_tilt_transient()
        self.assertGreaterEqual(result.improvement, 0.3)
        self.assertLess(result.peak_error_compensated, result.peak_error_uncompensated)


if __name__ == "__main__":
    unittest.main()
