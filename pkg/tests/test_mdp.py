import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import single_chain
from dqlambda.grid import ReturnFunction, lp_distance_array, make_uniform_grid
from dqlambda.mdp import (ConvergenceError, Policy, TabularMdp, epsilon_greedy, eta_pi_dp, greedy_policy,
                          mc_return_oracle, mc_returns, mix_policies, optimal_q, policy_l1_distance,
                          q_values, random_mdp, sample_segment, uniform_policy)
from dqlambda.operators import td_measure


class TestRandomMdp:
    def test_main_family_shape(self):
        mdp = random_mdp(0, 5, 20, 0.1, 0.9)
        assert mdp.transition.shape == (5, 20, 5)
        assert mdp.reward.shape == (5, 20)
        assert mdp.gamma == 0.9

    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
    def test_rows_normalised(self, seed, s, a):
        mdp = random_mdp(seed, s, a)
        np.testing.assert_allclose(mdp.transition.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(mdp.transition >= 0)

    def test_deterministic(self):
        a, b = random_mdp(3, 5, 4), random_mdp(3, 5, 4)
        assert np.array_equal(a.transition, b.transition) and np.array_equal(a.reward, b.reward)
        assert a.to_json() == b.to_json()

    @pytest.mark.parametrize("args", [(0, 0, 3), (0, 3, 0), (0, 3, 3, 0.0), (0, 3, 3, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            random_mdp(*args)

    def test_json_round_trip(self):
        mdp = random_mdp(1, 3, 2)
        back = TabularMdp.from_json(mdp.to_json())
        assert np.array_equal(back.transition, mdp.transition) and back.gamma == mdp.gamma

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            TabularMdp(np.full((1, 1, 2), 0.6), np.zeros((1, 1)), 0.9)


class TestPolicies:
    def test_mix_endpoints(self):
        mdp = random_mdp(0, 3, 4)
        g = greedy_policy(mdp.reward)
        mu = uniform_policy(mdp)
        assert mix_policies(1.0, g, mu) == g
        assert mix_policies(0.0, g, mu) == mu

    def test_tie_breaks_low(self):
        assert greedy_policy(np.array([[1.0, 1.0, 0.0]])).probs.tolist() == [[1.0, 0.0, 0.0]]

    def test_epsilon_greedy(self):
        p = epsilon_greedy(np.array([[0.0, 2.0]]), 0.2)
        np.testing.assert_allclose(p.probs, [[0.1, 0.9]])

    def test_l1_examples(self):
        pi = Policy(np.array([[1.0, 0.0], [0.0, 1.0]]))
        mu = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]))
        assert policy_l1_distance(pi, pi) == 0.0
        assert policy_l1_distance(pi, mu) == 2.0
        g = Policy(np.array([[1.0, 0.0, 0.0, 0.0]]))
        u = Policy(np.full((1, 4), 0.25))
        assert policy_l1_distance(g, u) == pytest.approx(1.5)

    @given(st.integers(0, 1000), st.floats(0.01, 100), st.floats(-50, 50))
    def test_greedy_affine_invariant(self, seed, scale, shift):
        q = np.random.default_rng(seed).normal(size=(4, 5))
        assert greedy_policy(q) == greedy_policy(scale * q + shift)

    @given(st.integers(0, 1000))
    def test_l1_bounds(self, seed):
        r = np.random.default_rng(seed)
        p = Policy(r.dirichlet(np.ones(3), size=2))
        q = Policy(r.dirichlet(np.ones(3), size=2))
        d = policy_l1_distance(p, q)
        assert 0 <= d <= 2 + 1e-12
        assert (d == 0) == (p == q)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mix_policies(0.5, Policy(np.ones((1, 2)) / 2), Policy(np.ones((2, 2)) / 2))


class TestSampling:
    def test_single_state_rewards(self, rng):
        seg = sample_segment(single_chain(1.5), uniform_policy(single_chain()), (0, 0), 3, rng)
        assert seg.rewards.tolist() == [1.5, 1.5, 1.5]
        np.testing.assert_allclose(seg.behavior_probs.sum(axis=1), 1.0)

    def test_next_state_frequencies(self, rng):
        mdp = random_mdp(2, 4, 2, dirichlet_rate=1.0)
        from dqlambda.mdp import sample_paths
        n = 100_000
        states, _, _ = sample_paths(mdp, uniform_policy(mdp), np.full(n, 1), np.full(n, 0), 1, rng)
        freq = np.bincount(states[:, 1], minlength=4) / n
        p = mdp.transition[1, 0]
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(freq - p) <= 3 * se + 1e-12)

    def test_rejects_empty(self, rng):
        with pytest.raises(ValueError):
            sample_segment(single_chain(), uniform_policy(single_chain()), (0, 0), 0, rng)


class TestOracles:
    def test_mc_single_chain(self, rng):
        g = make_uniform_grid(0, 4, 41)
        mdp = single_chain(1.0, 0.5)
        eta = mc_return_oracle(mdp, uniform_policy(mdp), g, 10, rng=rng)
        # truncated returns sit just below 2, so the projection is close to the Dirac at 2
        assert lp_distance_array(g, eta.masses[0, 0], np.eye(41)[20]) < 1e-3

    def test_mc_zero_reward(self, rng):
        mdp = TabularMdp(random_mdp(0, 3, 2).transition, np.zeros((3, 2)), 0.9)
        g = make_uniform_grid(-1, 1, 3)
        eta = mc_return_oracle(mdp, uniform_policy(mdp), g, 20, horizon=50, rng=rng)
        np.testing.assert_allclose(eta.masses[..., 1], 1.0, atol=1e-12)

    def test_mc_is_distribution(self, rng):
        mdp = random_mdp(4, 3, 2)
        lo, hi = mdp.return_range
        eta = mc_return_oracle(mdp, uniform_policy(mdp), make_uniform_grid(lo, hi, 11), 50, rng=rng)
        assert eta.min_mass() >= 0

    def test_mc_mean_matches_linear_solve(self, rng):
        mdp = random_mdp(5, 3, 2)
        pi = uniform_policy(mdp)
        q = q_values(mdp, pi)
        ret = mc_returns(mdp, pi, 4000, 200, rng)
        se = ret.std(axis=-1) / np.sqrt(ret.shape[-1])
        assert np.all(np.abs(ret.mean(axis=-1) - q) <= 3 * se + 1e-9)

    def test_dp_zero_reward(self):
        mdp = TabularMdp(random_mdp(0, 3, 2).transition, np.zeros((3, 2)), 0.9)
        g = make_uniform_grid(-1, 1, 5)
        eta = eta_pi_dp(mdp, greedy_policy(np.random.default_rng(0).normal(size=(3, 2))), g)
        np.testing.assert_allclose(eta.masses[..., 2], 1.0, atol=1e-9)

    def test_dp_single_chain_mean(self):
        g = make_uniform_grid(0, 4, 81)
        mdp = single_chain(1.0, 0.5)
        eta = eta_pi_dp(mdp, uniform_policy(mdp), g)
        assert abs(eta.means()[0, 0] - 2.0) <= g.dz

    def test_dp_residual(self):
        mdp = random_mdp(1, 3, 3)
        lo, hi = mdp.return_range
        g = make_uniform_grid(lo, hi, 15)
        pi = uniform_policy(mdp)
        eta = eta_pi_dp(mdp, pi, g, tol=1e-10)
        back = eta.masses + td_measure(mdp, pi, eta)
        assert np.max(lp_distance_array(g, back, eta.masses)) < 1e-10

    def test_dp_cap(self):
        mdp = random_mdp(1, 3, 3)
        lo, hi = mdp.return_range
        with pytest.raises(ConvergenceError):
            eta_pi_dp(mdp, uniform_policy(mdp), make_uniform_grid(lo, hi, 15), tol=1e-12, max_iter=3)

    def test_optimal_q_is_fixed_point(self):
        mdp = random_mdp(2, 4, 3)
        q = optimal_q(mdp)
        np.testing.assert_allclose(q, mdp.reward + mdp.gamma * mdp.transition @ q.max(axis=1), atol=1e-9)
        np.testing.assert_allclose(q, q_values(mdp, greedy_policy(q)), atol=1e-8)
