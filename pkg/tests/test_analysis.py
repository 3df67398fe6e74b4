import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dqlambda.analysis import (DomainError, approx_error_bound, beta_alt, beta_p, contraction_report,
                               control_error_bound, empirical_contraction, radius_alt, radius_l1, radius_l2,
                               random_signed_masses)
from dqlambda.grid import grid_for_returns
from dqlambda.mdp import mix_policies, greedy_policy, random_mdp, uniform_policy
from dqlambda.operators import TraceSpec

GAMMAS = np.linspace(0.02, 0.98, 20)
LAMS = np.linspace(0.02, 0.98, 20)
EPSILONS = np.linspace(0.0, 2.0, 20)


class TestBeta:
    @pytest.mark.parametrize("p", [1.0, 2.0, 3.0])
    def test_lambda_zero(self, p):
        assert beta_p(0.9, 0.0, 1.3, p) == pytest.approx(0.9 ** (1 / p))

    @pytest.mark.parametrize("p", [1.0, 2.0])
    def test_on_policy(self, p):
        assert beta_p(0.9, 0.5, 0.0, p) == pytest.approx((0.9 * 0.5 / 0.55) ** (1 / p))

    def test_hand_value(self):
        assert beta_p(0.9, 0.5, 0.2, 1.0) == pytest.approx(0.9 * 0.6 / 0.55)
        assert beta_p(0.9, 0.5, 0.2, 1.0) == pytest.approx(0.98181818, abs=1e-8)

    def test_lambda_one(self):
        with pytest.raises(DomainError):
            beta_p(0.9, 1.0, 0.5, 2.0)
        assert beta_p(0.9, 1.0, 0.5, 1.0) == pytest.approx(0.9 * 0.5 / 0.1)

    @pytest.mark.parametrize("args", [(1.0, 0.5, 0.1), (0.9, 0.5, 2.5), (0.9, -0.1, 0.1)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            beta_p(*args)

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0, 1.99), st.floats(1e-3, 0.01))
    def test_increasing_in_epsilon(self, gamma, lam, eps, step):
        assert beta_p(gamma, lam, eps + step, 1) > beta_p(gamma, lam, eps, 1)
        assert beta_p(gamma, lam, eps + step, 2) > beta_p(gamma, lam, eps, 2)


class TestRadii:
    def test_l1_hand(self):
        assert radius_l1(0.9, 0.5) == pytest.approx(0.1 / 0.45)

    def test_lambda_zero_infinite(self):
        assert math.isinf(radius_l1(0.9, 0.0)) and math.isinf(radius_l2(0.9, 0.0))

    def test_identities_on_grid(self):
        # strict inequalities on both sides; skip points within 1e-9 of the boundary
        for g in GAMMAS:
            for lam in LAMS:
                r1, r2 = radius_l1(g, lam), radius_l2(g, lam)
                for eps in EPSILONS:
                    if abs(eps - r1) > 1e-9:
                        assert (beta_p(g, lam, eps, 1) < 1) == (eps < r1)
                    if abs(eps - r2) > 1e-9:
                        assert (beta_p(g, lam, eps, 2) < 1) == (eps < r2)
                if abs(lam - radius_alt(g)) > 1e-9:
                    assert (beta_alt(g, lam) < 1) == (lam < radius_alt(g))

    def test_alt_dominates_l1_at_epsilon_two(self):
        for g in GAMMAS:
            for lam in LAMS:
                assert beta_alt(g, lam) >= beta_p(g, lam, 2.0, 1) - 1e-12

    def test_radius_alt_domain(self):
        with pytest.raises(DomainError):
            radius_alt(0.0)


class TestBounds:
    def test_examples(self):
        assert approx_error_bound(0.0, 0.7) == 0.0
        assert approx_error_bound(0.3, 0.0) == 0.3
        assert approx_error_bound(0.1, 0.6) == pytest.approx(0.125)
        assert control_error_bound(0.1, 0.6) == pytest.approx(0.125)

    @pytest.mark.parametrize("args", [(0.1, 1.0), (0.1, 1.2), (-0.1, 0.5)])
    def test_domain(self, args):
        with pytest.raises(DomainError):
            approx_error_bound(*args)


class TestReport:
    def test_consistency(self):
        rep = contraction_report(0.9, 0.5, 0.2)
        assert rep.contractive_l1 == (rep.beta_1 < 1) and rep.contractive_l2 == (rep.beta_2 < 1)
        assert rep.contractive_l1 == (rep.epsilon < rep.radius_l1)
        assert rep.contractive_l2 == (rep.epsilon < rep.radius_l2)
        assert min(rep.beta_1, rep.beta_2, rep.beta_alt) >= 0

    def test_json_safe(self):
        d = contraction_report(0.9, 0.0, 0.5).to_dict()
        assert d["radius_l1"] is None


class TestEmpirical:
    @given(st.integers(0, 1000))
    def test_random_inputs_bounded(self, seed):
        m = random_signed_masses(np.random.default_rng(seed), (4, 3), 7)
        np.testing.assert_allclose(m.sum(axis=-1), 1.0, atol=1e-12)
        assert m.min() >= -1.0 - 1e-12

    def test_one_step_rate(self, rng):
        mdp = random_mdp(0, 3, 3)
        g = grid_for_returns(mdp.reward.min(), mdp.reward.max(), mdp.gamma, 12)
        mu = uniform_policy(mdp)
        ratio = empirical_contraction(mdp, mu, mu, TraceSpec.one_step(), g, 50, rng)
        assert 0 < ratio <= math.sqrt(0.9) + 1e-9

    def test_on_policy_rate(self, rng):
        mdp = random_mdp(1, 3, 3)
        g = grid_for_returns(mdp.reward.min(), mdp.reward.max(), mdp.gamma, 12)
        pi = mix_policies(0.5, greedy_policy(mdp.reward), uniform_policy(mdp))
        ratio = empirical_contraction(mdp, pi, pi, TraceSpec.off_policy(0.5), g, 50, rng)
        assert ratio <= math.sqrt(0.45 / 0.55) + 1e-9

    def test_needs_pairs(self, rng):
        mdp = random_mdp(1, 2, 2)
        g = grid_for_returns(mdp.reward.min(), mdp.reward.max(), mdp.gamma, 5)
        with pytest.raises(ValueError):
            empirical_contraction(mdp, uniform_policy(mdp), uniform_policy(mdp), TraceSpec.one_step(), g, 0, rng)
