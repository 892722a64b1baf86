#!/usr/bin/env python3
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from tiltropter.backend.core import quat_rotate_inverse
from tiltropter.backend.errors import InvalidArgumentError, PlanningError
from tiltropter.backend.trajectory import (
    PHASE_AERIAL,
    PHASE_GROUND,
    PHASE_TRANSITION,
    FigureEight,
    HoverTrajectory,
    HybridMission,
    StepTrajectory,
    hybrid_mission,
    sample_horizon,
)

R_WHEEL = 0.1


def sampled(traj, dt=0.01):
    times = np.arange(0.0, traj.duration + 0.5 * dt, dt)
    return times, traj.sample(times)


class TestSimpleReferences(unittest.TestCase):

    def test_hover_horizon_is_constant(self):
        refs = sample_horizon(HoverTrajectory([0.0, 0.0, 1.0]), 2.0, 20, 0.1)
        self.assertEqual(len(refs), 21)
        for ref in refs:
            np.testing.assert_allclose(ref.p, [0.0, 0.0, 1.0])
            self.assertFalse(ref.contact)

    def test_hover_at_wheel_height_is_ground_reference(self):
        ref = HoverTrajectory([0.0, 0.0, R_WHEEL], r_wheel=R_WHEEL).evaluate(0.0)
        self.assertTrue(ref.contact)
        self.assertEqual(ref.phase, PHASE_GROUND)

    def test_step_switches_at_step_time(self):
        traj = StepTrajectory([0.0, 0.0, 1.0], [1.0, 0.0, 1.0], step_time=1.0, duration=3.0)
        np.testing.assert_allclose(traj.evaluate(0.99).p, [0.0, 0.0, 1.0])
        np.testing.assert_allclose(traj.evaluate(1.0).p, [1.0, 0.0, 1.0])

    def test_horizon_past_end_holds_terminal_point(self):
        traj = FigureEight()
        refs = sample_horizon(traj, traj.duration + 5.0, 10, 0.1)
        terminal = traj.evaluate(traj.duration)
        for ref in refs:
            np.testing.assert_allclose(ref.p, terminal.p)

    def test_horizon_matches_direct_evaluation(self):
        traj = FigureEight()
        refs = sample_horizon(traj, 3.0, 20, 0.1)
        for k, ref in enumerate(refs):
            np.testing.assert_allclose(ref.p, traj.evaluate(3.0 + k * 0.1).p, atol=1e-12)

    def test_horizon_rejects_bad_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            sample_horizon(HoverTrajectory([0.0, 0.0, 1.0]), 0.0, 0, 0.1)


class TestFigureEight(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.traj = FigureEight()
        cls.times, cls.refs = sampled(cls.traj)

    def test_starts_and_ends_at_center(self):
        np.testing.assert_allclose(self.refs[0].p, [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(self.refs[0].v, np.zeros(3), atol=1e-12)
        np.testing.assert_allclose(self.traj.evaluate(self.traj.duration).p, [0.0, 0.0, 1.0], atol=1e-9)

    def test_peak_speed_matches_limit(self):
        speeds = np.array([np.linalg.norm(r.v) for r in self.refs])
        self.assertLessEqual(speeds.max(), 1.5 + 1e-9)
        self.assertGreaterEqual(speeds.max(), 1.5 * 0.99)

    def test_velocity_matches_finite_difference(self):
        p = np.array([r.p for r in self.refs])
        v = np.array([r.v for r in self.refs])
        fd = (p[2:] - p[:-2]) / (2 * 0.01)
        self.assertLessEqual(np.max(np.abs(fd - v[1:-1])), 1e-3)

    def test_acceleration_within_limit(self):
        v = np.array([r.v for r in self.refs])
        fd = np.linalg.norm((v[2:] - v[:-2]) / (2 * 0.01), axis=1)
        self.assertLessEqual(fd.max(), 1.5 + 1e-3)

    def test_quaternions_unit(self):
        norms = [np.linalg.norm(r.q) for r in self.refs]
        np.testing.assert_allclose(norms, np.ones(len(norms)), atol=1e-9)

    def test_infeasible_limits_rejected(self):
        with self.assertRaises(PlanningError):
            FigureEight(v_max=3.0, a_max=0.5)
        with self.assertRaises(PlanningError):
            FigureEight(half_width=0.0)

    def test_ground_variant_is_heading_aligned(self):
        traj = FigureEight(altitude=R_WHEEL, v_max=0.5, a_max=0.15, ground=True)
        _, refs = sampled(traj, dt=0.05)
        for ref in refs:
            self.assertEqual(ref.p[2], R_WHEEL)
            self.assertTrue(ref.contact)
            self.assertLessEqual(abs(quat_rotate_inverse(ref.q, ref.v)[1]), 1e-6)


class TestHybridMission(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.mission = hybrid_mission(
            {"half_width": 2.0, "half_height": 1.0, "altitude": 1.0},
            {"half_width": 2.0, "half_height": 1.0, "v_max": 0.5, "a_max": 0.15},
            transition_duration=3.0,
            r_wheel=R_WHEEL,
        )
        cls.times, cls.refs = sampled(cls.mission)

    def test_phase_order(self):
        phases = [r.phase for r in self.refs]
        first_transition = phases.index(PHASE_TRANSITION)
        first_ground = phases.index(PHASE_GROUND)
        self.assertTrue(all(p == PHASE_AERIAL for p in phases[:first_transition]))
        self.assertLess(first_transition, first_ground)
        self.assertTrue(all(p == PHASE_GROUND for p in phases[first_ground:]))

    def test_ground_phase_height_is_wheel_radius(self):
        for ref in self.refs:
            if ref.phase == PHASE_GROUND:
                self.assertEqual(ref.p[2], R_WHEEL)
                self.assertTrue(ref.contact)

    def test_altitude_continuous_across_transition(self):
        z = np.array([r.p[2] for r in self.refs])
        self.assertLessEqual(np.max(np.abs(np.diff(z))), 0.5 * 0.01)
        v_z = np.array([r.v[2] for r in self.refs])
        self.assertLessEqual(np.max(np.abs(np.diff(v_z))), 1.5 * 0.01 + 1e-6)

    def test_touchdown_speed(self):
        touchdown = self.mission.evaluate(self.mission.t_ground - 1e-9)
        self.assertLessEqual(touchdown.v[2], 1e-9)
        self.assertGreaterEqual(touchdown.v[2], -0.3)

    def test_velocity_continuous_at_touchdown(self):
        before = self.mission.evaluate(self.mission.t_ground - 1e-6)
        after = self.mission.evaluate(self.mission.t_ground)
        self.assertEqual(after.phase, PHASE_GROUND)
        np.testing.assert_allclose(before.v, after.v, atol=1e-6)
        np.testing.assert_allclose(before.p, after.p, atol=1e-6)
        np.testing.assert_allclose(after.v, np.zeros(3), atol=1e-12)

    def test_ground_segment_must_roll_at_wheel_height(self):
        aerial = FigureEight()
        with self.assertRaises(PlanningError):
            HybridMission(aerial, FigureEight(altitude=0.5), 3.0, R_WHEEL)

    def test_short_transition_rejected(self):
        aerial = FigureEight()
        ground = FigureEight(altitude=R_WHEEL, v_max=0.5, a_max=0.15, ground=True)
        with self.assertRaises(PlanningError):
            HybridMission(aerial, ground, 0.5, R_WHEEL)


if __name__ == "__main__":
    unittest.main()
