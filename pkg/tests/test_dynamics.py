import numpy as np
import pytest

from doskit.dynamics import (HyperRectangle, Trajectory, f_image, make_system,
                             make_system_2d, make_system_3d, rollout, step)

from conftest import make_scalar_system


class TestHyperRectangle:
    def test_validates_ordering(self):
        with pytest.raises(ValueError):
            HyperRectangle([1.0, 0.0], [0.0, 1.0])

    def test_degenerate_allowed(self):
        box = HyperRectangle([0.0], [0.0])
        assert box.width[0] == 0.0
        assert box.contains(np.array([0.0]))

    def test_contains_batched(self):
        box = HyperRectangle([-1.0, -1.0], [1.0, 1.0])
        pts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(box.contains(pts), [True, False, True])

    def test_corners(self):
        box = HyperRectangle([0.0, 0.0], [1.0, 2.0])
        corners = box.corners()
        assert corners.shape == (4, 2)
        assert [1.0, 2.0] in corners.tolist()


class TestStep:
    def test_2d_equilibrium(self, system_2d):
        np.testing.assert_array_equal(
            step(system_2d, np.zeros(2), np.zeros(1)), np.zeros(2))

    def test_2d_hand_value(self, system_2d):
        # x2+ = 0 + 0.1*(1 + 1 + 0 + 0)
        got = step(system_2d, np.array([1.0, 0.0]), np.array([0.0]))
        np.testing.assert_allclose(got, [1.0, 0.2], rtol=0, atol=1e-15)

    def test_3d_hand_value(self, system_3d):
        got = step(system_3d, np.array([0.0, 0.0, 1.0]), np.array([0.0]))
        np.testing.assert_allclose(got, [0.0, 0.1, 1.0], rtol=0, atol=1e-15)

    def test_dimension_mismatch(self, system_2d):
        with pytest.raises(ValueError):
            step(system_2d, np.zeros(3), np.zeros(1))
        with pytest.raises(ValueError):
            step(system_2d, np.zeros(2), np.zeros(2))

    def test_broadcasts_over_batches(self, system_2d):
        xs = np.random.default_rng(0).uniform(-1, 1, (7, 2))
        us = np.random.default_rng(1).uniform(-0.5, 0.5, (7, 1))
        batch = system_2d.step_fn(xs, us)
        for i in range(7):
            np.testing.assert_array_equal(batch[i], step(system_2d, xs[i], us[i]))


class TestRollout:
    def test_equilibrium_stays(self, system_2d):
        traj = rollout(system_2d, np.zeros(2), np.zeros((5, 1)))
        np.testing.assert_array_equal(traj.states, np.zeros((6, 2)))

    def test_single_step_matches_step(self, system_2d):
        traj = rollout(system_2d, np.array([0.1, 0.0]), np.zeros((1, 1)))
        np.testing.assert_array_equal(
            traj.states[1], step(system_2d, np.array([0.1, 0.0]), np.zeros(1)))

    def test_geometric_decay(self, scalar_system):
        traj = rollout(scalar_system, np.array([1.0]), np.zeros((3, 1)))
        np.testing.assert_allclose(traj.states[:, 0], [1.0, 0.5, 0.25, 0.125],
                                   rtol=0, atol=0)

    def test_rejects_inadmissible_input(self, system_2d):
        with pytest.raises(ValueError, match="input"):
            rollout(system_2d, np.zeros(2), np.array([[0.6]]))

    def test_restep_reproduces_bit_exactly(self, system_2d):
        rng = np.random.default_rng(42)
        for _ in range(10):
            x0 = system_2d.domain_box.sample(rng)
            inputs = system_2d.input_box.sample(rng, 20)
            traj = rollout(system_2d, x0, inputs)
            for k in range(traj.horizon):
                redone = step(system_2d, traj.states[k], traj.inputs[k])
                assert np.array_equal(redone, traj.states[k + 1])

    def test_trajectory_shape_invariant(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((3, 2)), np.zeros((3, 1)))


class TestFImage:
    def test_2d_origin(self, system_2d):
        box = f_image(system_2d, np.zeros(2))
        np.testing.assert_allclose(box.lo, [0.0, -0.05])
        np.testing.assert_allclose(box.hi, [0.0, 0.05])

    def test_3d_origin(self, system_3d):
        box = f_image(system_3d, np.zeros(3))
        np.testing.assert_allclose(box.lo, [0.0, 0.0, -0.1])
        np.testing.assert_allclose(box.hi, [0.0, 0.0, 0.1])

    def test_2d_offset(self, system_2d):
        box = f_image(system_2d, np.array([1.0, 0.0]))
        np.testing.assert_allclose(box.lo, [1.0, 0.15])
        np.testing.assert_allclose(box.hi, [1.0, 0.25])

    @pytest.mark.parametrize("factory", [make_system_2d, make_system_3d])
    def test_image_contains_all_grid_inputs(self, factory):
        # 100 random states x 11 grid inputs, containment within 1e-12
        sys_spec = factory()
        rng = np.random.default_rng(7)
        u_grid = np.linspace(sys_spec.input_box.lo[0], sys_spec.input_box.hi[0], 11)
        for _ in range(100):
            x = sys_spec.domain_box.sample(rng)
            box = f_image(sys_spec, x)
            for u in u_grid:
                y = step(sys_spec, x, np.array([u]))
                assert box.contains(y, tol=1e-12)


class TestBuilders:
    def test_2d_metadata(self):
        sys_spec = make_system_2d()
        assert sys_spec.n == 2
        np.testing.assert_array_equal(sys_spec.domain_box.lo, [-1.0, -1.0])
        np.testing.assert_array_equal(sys_spec.domain_box.hi, [1.0, 1.0])
        np.testing.assert_array_equal(sys_spec.input_box.lo, [-0.5])

    def test_3d_metadata(self):
        sys_spec = make_system_3d()
        assert sys_spec.n == 3
        np.testing.assert_array_equal(sys_spec.input_box.lo, [-1.0])
        np.testing.assert_array_equal(sys_spec.input_box.hi, [1.0])

    def test_equilibria(self):
        for factory in (make_system_2d, make_system_3d):
            sys_spec = factory()
            np.testing.assert_array_equal(
                step(sys_spec, np.zeros(sys_spec.n), np.zeros(1)),
                np.zeros(sys_spec.n))

    def test_lookup(self):
        assert make_system("builtin-2d").name == "builtin-2d"
        with pytest.raises(ValueError):
            make_system("builtin-4d")

    def test_scalar_helper_image_consistent(self):
        sys_spec = make_scalar_system(gain=0.5, u_lo=-0.1, u_hi=0.2)
        box = f_image(sys_spec, np.array([1.0]))
        np.testing.assert_allclose(box.lo, [0.4])
        np.testing.assert_allclose(box.hi, [0.7])
