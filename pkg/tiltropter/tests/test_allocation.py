#!/usr/bin/env python3
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from tiltropter.backend.allocation import (
    allocation_frames,
    allocation_matrix,
    build_allocation,
    check_rank,
    extract_commands,
    forward_wrench,
    forward_wrench_from_angles,
    inverse_allocate,
    max_implied_servo_rate,
    servo_rates_from_wrench_rate,
    thrust_components,
    IntermediateThrust,
)
from tiltropter.backend.core import ActuatorState, VehicleParams, Wrench
from tiltropter.backend.errors import AllocationRankError, SingularConfigurationError


def random_wrenches(rng, n):
    """Wrenches inside the propulsive envelope of the default vehicle."""
    F_xy = rng.uniform(-0.2, 0.2, size=(n, 2))
    F_z = rng.uniform(5.0, 20.0, size=(n, 1))
    M = rng.uniform(-1.0, 1.0, size=(n, 3))
    return np.hstack((F_xy, F_z, M))


class TestAllocation(unittest.TestCase):
    """Allocation matrix, inverse allocation and command extraction"""

    @classmethod
    def setUpClass(cls):
        cls.params = VehicleParams()
        cls.model = build_allocation(cls.params)

    def setUp(self):
        self.rng = np.random.default_rng(42)

    def test_matrix_shape_and_rank(self):
        self.assertEqual(self.model.A.shape, (6, 8))
        self.assertEqual(self.model.A_pinv.shape, (8, 6))
        self.assertEqual(check_rank(self.model.A), 6)

    def test_rank_deficiency_reported(self):
        A = np.array(self.model.A)
        A[5, :] = 0.0
        with self.assertRaises(AllocationRankError) as ctx:
            check_rank(A)
        self.assertEqual(ctx.exception.rank, 5)
        self.assertTrue(ctx.exception.deficient_directions)

    def test_hover_splits_evenly(self):
        W = Wrench(np.array([0.0, 0.0, self.params.weight]), np.zeros(3))
        T = inverse_allocate(self.model, W)
        np.testing.assert_allclose(T.lateral, np.zeros(4), atol=1e-12)
        np.testing.assert_allclose(T.vertical, np.full(4, self.params.weight / 4), atol=1e-9)
        cmd = extract_commands(T, self.params.c_t, self.params.omega_max)
        np.testing.assert_allclose(cmd.alpha, np.full(4, np.pi / 2), atol=1e-12)
        self.assertFalse(cmd.saturated)

    def test_round_trip(self):
        for W in random_wrenches(self.rng, 1000):
            T = inverse_allocate(self.model, W)
            cmd = extract_commands(T, self.params.c_t, self.params.omega_max)
            back = forward_wrench_from_angles(self.model, cmd.omega, cmd.alpha).as_vector()
            self.assertLessEqual(np.linalg.norm(back - W) / np.linalg.norm(W), 1e-9)

    def test_minimum_norm_solution(self):
        projector = self.model.A_pinv @ self.model.A
        for W in random_wrenches(self.rng, 1000):
            T = self.model.A_pinv @ W
            self.assertLessEqual(np.linalg.norm(projector @ T - T), 1e-10)

    def test_zero_thrust_holds_previous_tilt(self):
        previous = np.array([0.1, 0.2, 0.3, 0.4])
        cmd = extract_commands(IntermediateThrust(np.zeros(8)), self.params.c_t, previous_alpha=previous)
        np.testing.assert_allclose(cmd.omega, np.zeros(4))
        np.testing.assert_allclose(cmd.alpha, previous)
        self.assertEqual(cmd.held_rotors, (0, 1, 2, 3))

    def test_saturation_clamps_without_redistribution(self):
        W = Wrench(np.array([0.0, 0.0, 4.0 * self.model.thrust_max * 1.5]), np.zeros(3))
        cmd = extract_commands(inverse_allocate(self.model, W), self.params.c_t, self.params.omega_max)
        self.assertTrue(cmd.saturated)
        np.testing.assert_allclose(cmd.omega, np.full(4, self.params.omega_max))

    def test_servo_rates_match_finite_differences(self):
        h = 1e-6
        checked = 0
        for W, W_dot in zip(random_wrenches(self.rng, 1000), self.rng.normal(size=(1000, 6))):
            if np.min(inverse_allocate(self.model, W).magnitudes) <= 0.1:
                continue
            analytic = servo_rates_from_wrench_rate(self.model, W, W_dot)
            plus = inverse_allocate(self.model, W + h * W_dot)
            minus = inverse_allocate(self.model, W - h * W_dot)
            delta = np.arctan2(plus.vertical, plus.lateral) - np.arctan2(minus.vertical, minus.lateral)
            delta = np.arctan2(np.sin(delta), np.cos(delta))
            np.testing.assert_allclose(analytic, delta / (2 * h), atol=1e-5)
            checked += 1
        self.assertGreater(checked, 500)

    def test_servo_rate_singular_at_zero_thrust(self):
        with self.assertRaises(SingularConfigurationError):
            servo_rates_from_wrench_rate(self.model, np.zeros(6), np.ones(6))

    def test_max_implied_rate_ignores_idle_rotors(self):
        wrenches = np.zeros((3, 6))
        rates = np.ones((3, 6))
        self.assertEqual(max_implied_servo_rate(self.model, wrenches, rates), 0.0)

    def test_matrix_matches_per_rotor_summation(self):
        z = np.array([0.0, 0.0, 1.0])
        k = self.params.drag_ratio
        for T in self.rng.normal(size=(200, 8)):
            force, moment = np.zeros(3), np.zeros(3)
            for i in range(4):
                tangent = np.cross(z, self.params.arm_axes[i])
                tangent /= np.linalg.norm(tangent)
                f = T[2 * i] * tangent + T[2 * i + 1] * z
                force += f
                moment += np.cross(self.params.rotor_positions[i], f) - self.params.spin_dirs[i] * k * f
            np.testing.assert_allclose(self.model.A @ T, np.concatenate((force, moment)), atol=1e-12)

    def test_vertical_columns_sum_to_pure_lift(self):
        summed = self.model.A[:, 1::2].sum(axis=1)
        np.testing.assert_allclose(summed[:3], [0.0, 0.0, 4.0], atol=1e-12)
        np.testing.assert_allclose(summed[3:5], [0.0, 0.0], atol=1e-12)

    def test_matrix_is_constant(self):
        first = allocation_matrix(self.params)
        second = allocation_matrix(self.params)
        self.assertEqual(first.tobytes(), second.tobytes())
        self.assertEqual(build_allocation(self.params).A.tobytes(), self.model.A.tobytes())
        self.assertFalse(self.model.A.flags.writeable)
        with self.assertRaises(ValueError):
            self.model.A[0, 0] = 1.0

    def test_three_four_five_rotor(self):
        T = IntermediateThrust(np.array([3.0, 4.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]))
        cmd = extract_commands(T, self.params.c_t)
        self.assertAlmostEqual(cmd.alpha[0], np.arctan2(4.0, 3.0), places=12)
        self.assertAlmostEqual(self.params.c_t * cmd.omega[0] ** 2, 5.0, places=9)
        np.testing.assert_allclose(cmd.alpha[1:], np.full(3, np.pi / 2), atol=1e-12)

    def test_polar_and_cartesian_thrust_agree(self):
        for T in self.rng.uniform(-3.0, 3.0, size=(500, 8)):
            cmd = extract_commands(IntermediateThrust(T), self.params.c_t)
            actuators = ActuatorState(omega=cmd.omega, alpha=cmd.alpha, alpha_cmd=cmd.alpha)
            np.testing.assert_allclose(thrust_components(actuators, self.params.c_t), T, atol=1e-10)

    def test_upright_rotors_give_no_lateral_force(self):
        omega = np.array([300.0, 350.0, 400.0, 450.0])
        upright = np.full(4, np.pi / 2)
        W = forward_wrench(self.model, ActuatorState(omega=omega, alpha=upright, alpha_cmd=upright))
        np.testing.assert_allclose(W.F[:2], np.zeros(2), atol=1e-12)
        self.assertAlmostEqual(W.F[2], self.params.c_t * float(np.sum(omega ** 2)), places=9)

    def test_hover_lift_rate_needs_no_tilt_rate(self):
        W = Wrench(np.array([0.0, 0.0, self.params.weight]), np.zeros(3))
        W_dot = Wrench(np.array([0.0, 0.0, 2.0]), np.zeros(3))
        np.testing.assert_allclose(servo_rates_from_wrench_rate(self.model, W, W_dot), np.zeros(4), atol=1e-12)

    def test_frames_are_labeled(self):
        A, A_pinv = allocation_frames(self.model)
        self.assertEqual(list(A.index), ["F_x", "F_y", "F_z", "M_x", "M_y", "M_z"])
        self.assertEqual(list(A.columns)[:2], ["T1_l", "T1_v"])
        self.assertEqual(A_pinv.shape, (8, 6))


if __name__ == "__main__":
    unittest.main()
