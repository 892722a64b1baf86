#!/usr/bin/env python3
import os
import sys
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from tiltropter.backend.core import (
    ActuatorState,
    RigidBodyState,
    VehicleParams,
    Wrench,
    quat_derivative,
    quat_error,
    quat_from_axis_angle,
    quat_from_yaw,
    quat_identity,
    quat_inverse,
    quat_multiply,
    quat_normalize,
    quat_rotate,
)
from tiltropter.backend.errors import InvalidArgumentError, ParameterError


def random_unit_quaternion(rng):
    return quat_normalize(rng.normal(size=4))


class TestQuaternions(unittest.TestCase):
    """Scalar-first, body-to-inertial quaternion helpers"""

    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_identity_rotation(self):
        np.testing.assert_allclose(quat_rotate(quat_identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_yaw_rotates_x_onto_y(self):
        np.testing.assert_allclose(quat_rotate(quat_from_yaw(np.pi / 2), [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    def test_rotation_round_trip_and_norm(self):
        for _ in range(200):
            q = random_unit_quaternion(self.rng)
            v = self.rng.normal(size=3)
            rotated = quat_rotate(q, v)
            self.assertAlmostEqual(np.linalg.norm(rotated), np.linalg.norm(v), delta=1e-9)
            np.testing.assert_allclose(quat_rotate(quat_inverse(q), rotated), v, atol=1e-12)

    def test_non_unit_quaternion_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            quat_rotate([2.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0])

    def test_derivative_examples(self):
        np.testing.assert_allclose(quat_derivative(quat_identity(), [0.0, 0.0, 0.0]), np.zeros(4))
        np.testing.assert_allclose(quat_derivative(quat_identity(), [0.0, 0.0, 2.0]), [0.0, 0.0, 0.0, 1.0])

    def test_derivative_orthogonal_to_q(self):
        for _ in range(200):
            q = random_unit_quaternion(self.rng)
            q_dot = quat_derivative(q, self.rng.normal(size=3))
            self.assertAlmostEqual(float(np.dot(q, q_dot)), 0.0, delta=1e-12)

    def test_error_zero_and_double_cover(self):
        q = random_unit_quaternion(self.rng)
        np.testing.assert_allclose(quat_error(q, q), quat_identity(), atol=1e-12)
        np.testing.assert_allclose(quat_error(-q, q), quat_identity(), atol=1e-12)

    def test_error_composes_back(self):
        q = quat_from_yaw(np.pi / 2)
        err = quat_error(q, quat_identity())
        np.testing.assert_allclose(err, q, atol=1e-12)
        for _ in range(100):
            q, q_ref = random_unit_quaternion(self.rng), random_unit_quaternion(self.rng)
            err = quat_error(q, q_ref)
            self.assertGreaterEqual(err[0], 0.0)
            self.assertLessEqual(err[0], 1.0 + 1e-12)
            recomposed = quat_multiply(err, q_ref)
            self.assertTrue(np.allclose(recomposed, q, atol=1e-12) or np.allclose(recomposed, -q, atol=1e-12))


class TestValueTypes(unittest.TestCase):
    """State, wrench and parameter validation"""

    def test_state_normalizes_quaternion(self):
        q = quat_from_axis_angle([1.0, 0.0, 0.0], 0.3) * (1.0 + 1e-8)
        state = RigidBodyState(p=np.zeros(3), v=np.zeros(3), q=q, omega=np.zeros(3))
        self.assertAlmostEqual(np.linalg.norm(state.q), 1.0, delta=1e-12)

    def test_state_rejects_non_finite(self):
        with self.assertRaises(InvalidArgumentError):
            RigidBodyState(p=[np.nan, 0.0, 0.0], v=np.zeros(3), q=quat_identity(), omega=np.zeros(3))

    def test_state_vector_layout(self):
        state = RigidBodyState.at_rest(p=(1.0, 2.0, 3.0), yaw=0.4)
        x = state.as_vector()
        self.assertEqual(x.shape, (13,))
        np.testing.assert_allclose(x[0:3], [1.0, 2.0, 3.0])
        np.testing.assert_allclose(RigidBodyState.from_vector(x).q, state.q)

    def test_wrench_arithmetic(self):
        a = Wrench.from_vector([1, 2, 3, 4, 5, 6])
        b = Wrench.from_vector([1, 1, 1, 1, 1, 1])
        np.testing.assert_allclose((a - b).as_vector(), [0, 1, 2, 3, 4, 5])
        np.testing.assert_allclose(a.scaled(2.0).F, [2, 4, 6])

    def test_default_params_valid(self):
        params = VehicleParams()
        self.assertAlmostEqual(params.weight, 1.5 * 9.81)
        np.testing.assert_allclose(np.linalg.norm(params.arm_axes, axis=1), np.ones(4), atol=1e-12)

    def test_params_reject_bad_inertia(self):
        with self.assertRaises(ParameterError):
            VehicleParams(J=np.diag([0.01, -0.01, 0.02]))

    def test_params_reject_nonpositive_mass(self):
        with self.assertRaises(ParameterError):
            VehicleParams(m=0.0)

    def test_params_reject_coincident_rotors(self):
        positions = np.array([[0.1, 0.1, 0.0], [0.2, 0.2, 0.0], [-0.1, -0.1, 0.0], [0.1, -0.1, 0.0]])
        with self.assertRaises(ParameterError):
            VehicleParams(rotor_positions=positions)

    def test_actuator_rejects_negative_speed(self):
        with self.assertRaises(InvalidArgumentError):
            ActuatorState(omega=[-1.0, 0.0, 0.0, 0.0], alpha=np.zeros(4), alpha_cmd=np.zeros(4))


if __name__ == "__main__":
    unittest.main()
