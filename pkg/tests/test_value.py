import math

import numpy as np
import pytest

from doskit.errors import BudgetExceededError
from doskit.value import (AlphaFn, ValueParams, alpha, bellman_residual_v, beta,
                          oracle_value, oracle_value_points, psi, quadratic_form,
                          sample_signal, sampled_reach, v_tilde, v_tilde_batch,
                          w_tilde, xi, zubov_residual_w)
from doskit.dynamics import step

from conftest import make_scalar_system


class TestAlpha:
    def test_zero_at_origin(self):
        a = AlphaFn(np.eye(2))
        assert alpha(a, np.zeros(2)) == 0.0

    def test_squared_norm(self):
        a = AlphaFn(np.eye(2))
        assert alpha(a, np.array([0.3, 0.4])) == pytest.approx(0.25, abs=1e-15)

    def test_scaled_diagonal(self):
        a = AlphaFn(np.diag([2.0, 1.0]), c=0.5)
        assert alpha(a, np.array([1.0, 1.0])) == pytest.approx(1.5, abs=1e-15)

    def test_positive_away_from_origin(self):
        a = AlphaFn(np.array([[2.0, 0.3], [0.3, 1.0]]), c=0.7)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.normal(size=2)
            assert alpha(a, x) > 0.0

    def test_nonfinite_states_cost_inf(self):
        a = AlphaFn(np.eye(2))
        pts = np.array([[1.0, 1.0], [np.inf, -np.inf], [np.nan, 0.0]])
        vals = alpha(a, pts)
        assert vals[0] == 2.0
        assert np.isposinf(vals[1]) and np.isposinf(vals[2])

    def test_rejects_bad_p(self):
        with pytest.raises(ValueError):
            AlphaFn(np.array([[1.0, 2.0], [0.0, 1.0]]))  # asymmetric
        with pytest.raises(ValueError):
            AlphaFn(-np.eye(2))  # not positive definite
        with pytest.raises(ValueError):
            AlphaFn(np.eye(2), c=0.0)

    def test_quadratic_form_batch_matches_single(self):
        P = np.array([[2.0, 0.5], [0.5, 1.5]])
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 2))
        batch = quadratic_form(P, pts)
        stacked = quadratic_form(P, pts.reshape(4, 10, 2)).ravel()
        assert np.array_equal(batch, stacked)
        for i in range(40):
            assert quadratic_form(P, pts[i]) == batch[i]


class TestPsi:
    def test_vanishes_when_set_meets_target(self):
        a = AlphaFn(np.eye(2))
        assert psi(np.array([[0.0, 0.0]]), a) == 0.0
        assert psi(np.array([[1.0, 0.0], [0.0, 0.0]]), a) == 0.0

    def test_min_over_set(self):
        a = AlphaFn(np.eye(2))
        assert psi(np.array([[0.3, 0.4], [1.0, 0.0]]), a) == pytest.approx(0.25)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError):
            psi(np.zeros((0, 2)), AlphaFn(np.eye(2)))

    def test_monotone_under_inclusion(self):
        a = AlphaFn(np.array([[1.5, 0.2], [0.2, 0.8]]))
        rng = np.random.default_rng(11)
        for _ in range(50):
            big = rng.normal(size=(20, 2))
            small = big[: rng.integers(1, 20)]
            assert psi(small, a) >= psi(big, a)


class TestSampleSignal:
    def test_degenerate_box_gives_zeros(self, scalar_system):
        sig = sample_signal(scalar_system, 10, np.random.default_rng(0))
        np.testing.assert_array_equal(sig, np.zeros((10, 1)))

    def test_range_containment(self, system_2d):
        sig = sample_signal(system_2d, 30, np.random.default_rng(1))
        assert sig.shape == (30, 1)
        assert np.all(sig >= -0.5) and np.all(sig <= 0.5)

    def test_deterministic_for_fixed_seed(self, system_2d):
        s1 = sample_signal(system_2d, 30, np.random.default_rng(42))
        s2 = sample_signal(system_2d, 30, np.random.default_rng(42))
        assert np.array_equal(s1, s2)


class TestSampledReach:
    def test_deterministic_scalar_clouds(self, scalar_system):
        vp = ValueParams(n_s=2, n_traj=1)
        reach = sampled_reach(scalar_system, np.array([1.0]), vp,
                              np.random.default_rng(0))
        got = [c[:, 0].tolist() for c in reach.clouds]
        assert got == [[1.0], [0.5], [0.25]]

    def test_first_cloud_is_singleton(self, system_2d):
        vp = ValueParams(n_s=3, n_traj=17)
        x = np.array([0.3, -0.2])
        reach = sampled_reach(system_2d, x, vp, np.random.default_rng(5))
        assert reach.clouds[0].shape == (1, 2)
        np.testing.assert_array_equal(reach.clouds[0][0], x)
        assert all(c.shape == (17, 2) for c in reach.clouds[1:])

    def test_clouds_inside_interval_tube(self, system_2d):
        # independent oracle: propagate an interval box through the dynamics
        vp = ValueParams(n_s=10, n_traj=200)
        reach = sampled_reach(system_2d, np.zeros(2), vp, np.random.default_rng(9))
        lo = np.zeros(2)
        hi = np.zeros(2)
        for cloud in reach.clouds:
            assert np.all(cloud >= lo - 1e-12) and np.all(cloud <= hi + 1e-12)
            # interval arithmetic step: monotone terms only (x^3 is monotone)
            new_lo = np.array([lo[0] + 0.1 * lo[1],
                               lo[1] + 0.1 * (lo[0] + lo[0] ** 3 + lo[1] - 0.5)])
            new_hi = np.array([hi[0] + 0.1 * hi[1],
                               hi[1] + 0.1 * (hi[0] + hi[0] ** 3 + hi[1] + 0.5)])
            lo, hi = new_lo, new_hi


class TestVTilde:
    def test_origin_value_zero_term(self, system_2d, system_3d):
        for sys_spec in (system_2d, system_3d):
            a = AlphaFn(np.eye(sys_spec.n))
            vp = ValueParams(n_s=5, n_traj=20)
            v = v_tilde(sys_spec, np.zeros(sys_spec.n), a, vp,
                        np.random.default_rng(0))
            assert v >= 0.0

    def test_scalar_geometric_series(self, scalar_system):
        a = AlphaFn(np.eye(1))
        vp = ValueParams(n_s=30, n_traj=1)
        v = v_tilde(scalar_system, np.array([1.0]), a, vp, np.random.default_rng(0))
        expected = (1.0 - 0.25 ** 31) / 0.75
        assert abs(v - expected) < 1e-9

    def test_lower_bounded_by_alpha(self, system_2d):
        a = AlphaFn(np.eye(2), c=0.5)
        vp = ValueParams(n_s=8, n_traj=30)
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = system_2d.domain_box.sample(rng)
            assert v_tilde(system_2d, x, a, vp, np.random.default_rng(3)) >= alpha(a, x)

    def test_nested_samples_never_increase(self, system_2d):
        a = AlphaFn(np.eye(2))
        small = ValueParams(n_s=20, n_traj=25)
        large = ValueParams(n_s=20, n_traj=50)
        rng = np.random.default_rng(4)
        for i in range(25):
            x = system_2d.domain_box.sample(rng)
            v_small = v_tilde(system_2d, x, a, small, np.random.default_rng(i))
            v_large = v_tilde(system_2d, x, a, large, np.random.default_rng(i))
            assert v_large <= v_small

    def test_matches_sampled_reach_bitwise(self, system_2d):
        a = AlphaFn(np.array([[2.0, 0.1], [0.1, 1.0]]), c=0.3)
        vp = ValueParams(n_s=12, n_traj=40)
        x = np.array([0.2, -0.4])
        reach = sampled_reach(system_2d, x, vp, np.random.default_rng(8))
        total = sum(psi(c, a) for c in reach.clouds)
        assert total == v_tilde(system_2d, x, a, vp, np.random.default_rng(8))

    def test_batch_matches_single_bitwise(self, system_2d):
        a = AlphaFn(np.eye(2))
        vp = ValueParams(n_s=15, n_traj=60)
        xs = np.random.default_rng(1).uniform(-1, 1, (9, 2))
        seeds = [77 ^ i for i in range(9)]
        batch = v_tilde_batch(system_2d, xs, a, vp, seeds)
        single = [v_tilde(system_2d, x, a, vp, np.random.default_rng(sd))
                  for x, sd in zip(xs, seeds)]
        assert np.array_equal(batch, np.array(single))


class TestTransforms:
    def test_w_tilde_basics(self):
        assert w_tilde(0.0) == 0.0
        assert w_tilde(4.0 / 3.0) == pytest.approx(1 - math.exp(-4.0 / 3.0), abs=1e-12)
        assert w_tilde(np.inf) == 1.0
        with pytest.raises(ValueError):
            w_tilde(-0.1)

    def test_w_tilde_range_and_monotonicity(self):
        vals = np.concatenate([np.linspace(0, 50, 500), [1e6, 1e300]])
        w = w_tilde(vals)
        assert np.all(w >= 0.0) and np.all(w < 1.0)
        rng = np.random.default_rng(0)
        for _ in range(200):
            v1, v2 = np.sort(rng.uniform(0, 20, 2))
            if v1 != v2:
                assert w_tilde(v1) < w_tilde(v2) or w_tilde(v2) == w_tilde(1e309 if False else v2)
        # strictly increasing where not saturated
        grid = np.linspace(0, 30, 100)
        w = w_tilde(grid)
        assert np.all(np.diff(w) >= 0.0)

    def test_xi_values(self):
        assert xi(0.0) == 0.0
        assert xi(math.log(2.0)) == pytest.approx(0.5, abs=1e-12)
        assert xi(0.25) == pytest.approx(1 - math.exp(-0.25), abs=1e-12)
        assert xi(np.inf) < 1.0

    def test_beta_values(self):
        assert beta(0.0) == 0.0
        assert beta(math.log(2.0)) == pytest.approx(1.0, abs=1e-12)
        assert beta(0.25) == pytest.approx(math.exp(0.25) - 1.0, abs=1e-9)
        assert np.isfinite(beta(1e9))  # capped before exponentiation

    def test_duality_identity(self):
        rng = np.random.default_rng(0)
        p = rng.uniform(0.0, 10.0, 1000)
        err = np.abs((1.0 - np.asarray(xi(p))) * (1.0 + np.asarray(beta(p))) - 1.0)
        assert np.max(err) < 1e-12


class TestOracle:
    def test_stays_at_equilibrium(self, system_2d):
        a = AlphaFn(np.eye(2))
        assert oracle_value(system_2d, np.zeros(2), a, [0.0], 4) == 0.0

    def test_scalar_hand_sum(self):
        sys_spec = make_scalar_system(gain=0.5, u_lo=-0.5, u_hi=0.5)
        a = AlphaFn(np.eye(1))
        v = oracle_value(sys_spec, np.array([1.0]), a, [0.0], 3)
        assert v == pytest.approx(1.0 + 0.25 + 0.0625 + 0.015625, abs=1e-14)

    def test_bellman_recursion_2d(self, system_2d):
        a = AlphaFn(np.eye(2))
        lattice = np.array([-0.5, 0.0, 0.5])
        rng = np.random.default_rng(13)
        for _ in range(20):
            x = system_2d.domain_box.sample(rng)
            v_n = oracle_value(system_2d, x, a, lattice, 5)
            image = np.stack([step(system_2d, x, np.array([u])) for u in lattice])
            v_rec = alpha(a, x) + oracle_value_points(system_2d, image, a, lattice, 4)
            assert abs(v_n - v_rec) < 1e-12

    def test_budget_enforced(self, system_2d):
        a = AlphaFn(np.eye(2))
        lattice = np.linspace(-0.5, 0.5, 30)
        with pytest.raises(BudgetExceededError):
            oracle_value(system_2d, np.array([0.3, 0.3]), a, lattice, 8)

    def test_dedup_keeps_result(self):
        sys_spec = make_scalar_system(gain=0.5, u_lo=-0.5, u_hi=0.5)
        a = AlphaFn(np.eye(1))
        # duplicated lattice entries collapse to the same levels
        v1 = oracle_value(sys_spec, np.array([1.0]), a, [0.0, 0.0, 0.0], 3)
        v2 = oracle_value(sys_spec, np.array([1.0]), a, [0.0], 3)
        assert v1 == v2


class TestResiduals:
    def test_bellman_residual_examples(self):
        assert bellman_residual_v(0.0, 0.0, 0.0) == 0.0
        assert bellman_residual_v(1.0, 0.5, 0.3) == pytest.approx(0.2)
        assert bellman_residual_v(1.328125, 0.328125, 1.0) == 0.0

    def test_zubov_residual_zero_cases(self):
        assert zubov_residual_w(0.5, 0.5, 0.0) == 0.0
        # hand arithmetic: 0.5 - 0.25 - 0.5*0.75
        assert zubov_residual_w(0.5, 0.25, 0.5) == pytest.approx(-0.125)

    def test_oracle_satisfies_zubov_equation(self, system_2d):
        # lookup-table evaluation of the exact finite-lattice value function
        a = AlphaFn(np.eye(2), c=0.8)
        lattice = np.array([-0.5, 0.0, 0.5])
        rng = np.random.default_rng(21)
        for _ in range(10):
            x = system_2d.domain_box.sample(rng)
            v_x = oracle_value(system_2d, x, a, lattice, 6)
            image = np.stack([step(system_2d, x, np.array([u])) for u in lattice])
            v_fx = oracle_value_points(system_2d, image, a, lattice, 5)
            w_x, w_fx = w_tilde(v_x), w_tilde(v_fx)
            res = zubov_residual_w(w_x, w_fx, xi(alpha(a, x)))
            assert abs(res) < 1e-10
