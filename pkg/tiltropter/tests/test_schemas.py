#!/usr/bin/env python3
import argparse
import glob
import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
from pydantic import ValidationError

ROOT = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(ROOT)

from tiltropter.backend.cli import _sweep_one, apply_overrides, main
from tiltropter.backend.core import VehicleParams
from tiltropter.backend.schemas import ScenarioConfig, VehicleConfig, load_scenario
from tiltropter.backend.trajectory import FigureEight, HybridMission
from tiltropter.backend.wrench_est import synthesize_servo_dataset


class TestScenarioSchema(unittest.TestCase):
    """Scenario validation and the bundled configuration files"""

    def test_control_period_must_be_multiple_of_sim_step(self):
        with self.assertRaises(ValidationError):
            ScenarioConfig(dt_sim=0.003, dt_ctrl=0.01)
        with self.assertRaises(ValidationError):
            ScenarioConfig(dt_sim=0.002, dt_ctrl=0.001)
        self.assertEqual(ScenarioConfig(dt_sim=0.002, dt_ctrl=0.01).dt_ctrl, 0.01)

    def test_step_needs_target(self):
        with self.assertRaises(ValidationError):
            ScenarioConfig.model_validate({"trajectory": {"type": "step"}})

    def test_unknown_keys_rejected(self):
        with self.assertRaises(ValidationError):
            ScenarioConfig.model_validate({"nmpc": {"horizon": 20}})

    def test_duration_shorter_than_trajectory_rejected(self):
        with self.assertRaises(ValidationError):
            ScenarioConfig.model_validate({"trajectory": {"type": "hover", "duration": 5.0}, "duration": 1.0})

    def test_default_vehicle_file_matches_defaults(self):
        vehicle = VehicleConfig.from_yaml(os.path.join(ROOT, "config", "vehicle_default.yaml")).to_params()
        defaults = VehicleParams()
        self.assertAlmostEqual(vehicle.m, defaults.m)
        self.assertAlmostEqual(vehicle.r_wheel, defaults.r_wheel)
        np.testing.assert_allclose(vehicle.rotor_positions, defaults.rotor_positions)

    def test_bundled_scenarios_load(self):
        paths = sorted(glob.glob(os.path.join(ROOT, "scenarios", "*.yaml")))
        self.assertGreaterEqual(len(paths), 6)
        for path in paths:
            cfg = load_scenario(path)
            traj = cfg.build_trajectory()
            self.assertGreater(cfg.run_duration(), 0.0, path)
            if cfg.trajectory.type == "hybrid":
                self.assertIsInstance(traj, HybridMission)
            if cfg.trajectory.type == "ground_figure_eight":
                self.assertIsInstance(traj, FigureEight)
                self.assertTrue(traj.evaluate(0.0).contact)


class TestCommandLine(unittest.TestCase):

    def test_overrides_revalidate_scenario(self):
        args = argparse.Namespace(seed=11, no_noise=True, no_estimator=True, rti=True)
        cfg = apply_overrides(ScenarioConfig(), args)
        self.assertEqual(cfg.seed, 11)
        self.assertFalse(cfg.noise.enabled)
        self.assertFalse(cfg.estimator.enabled)
        self.assertEqual(cfg.nmpc_config().max_iter, 1)

    def test_missing_flags_leave_scenario_alone(self):
        cfg = ScenarioConfig(seed=5)
        self.assertEqual(apply_overrides(cfg, argparse.Namespace()).model_dump(), cfg.model_dump())

    def test_dump_allocation(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["dump-allocation", "--out", tmp]), 0)
            A = pd.read_csv(os.path.join(tmp, "allocation_A.csv"), index_col=0)
            A_pinv = pd.read_csv(os.path.join(tmp, "allocation_A_pinv.csv"), index_col=0)
        self.assertEqual(A.shape, (6, 8))
        self.assertEqual(A_pinv.shape, (8, 6))

    def test_identify_servo(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "servo.csv")
            synthesize_servo_dataset(0.05).to_frame().to_csv(path, index=False)
            self.assertEqual(main(["identify-servo", path]), 0)

    def test_sweep_records_invalid_scenarios_as_failed(self):
        with tempfile.TemporaryDirectory() as tmp:
            scenarios = os.path.join(tmp, "scenarios")
            os.makedirs(scenarios)
            with open(os.path.join(scenarios, "unknown_key.yaml"), "w") as f:
                f.write("name: unknown_key\nnmpc:\n  horizon: 20\n")
            with open(os.path.join(scenarios, "broken.yaml"), "w") as f:
                f.write("name: [unclosed\n")
            row = _sweep_one((os.path.join(scenarios, "unknown_key.yaml"), {}, tmp))
            self.assertTrue(row["failed"])
            self.assertEqual(row["name"], "unknown_key")
            row = _sweep_one((os.path.join(scenarios, "broken.yaml"), {}, tmp))
            self.assertTrue(row["failed"])
            self.assertEqual(row["name"], "broken")

            out = os.path.join(tmp, "out")
            self.assertEqual(main(["sweep", scenarios, "--workers", "1", "--out", out]), 1)
            summary = pd.read_csv(os.path.join(out, "sweep_summary.csv"))
        self.assertEqual(sorted(summary["name"]), ["broken", "unknown_key"])
        self.assertTrue(summary["failed"].all())

    def test_errors_map_to_exit_code(self):
        self.assertEqual(main(["metrics", "not_a_log.csv"]), 2)
        self.assertEqual(main(["run", "/nonexistent/scenario.yaml"]), 2)


if __name__ == "__main__":
    unittest.main()
