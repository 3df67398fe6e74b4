import math

import numpy as np
import pytest

from dqlambda.analysis import beta_p, radius_l2
from dqlambda.engine import (CSV_COLUMNS, RunConfig, control, evaluate, figure1_trace, logs_from_csv, logs_to_csv,
                             make_grid, run_evaluate, summarize, summary_json)
from dqlambda.grid import grid_for_returns
from dqlambda.mdp import greedy_policy, mix_policies, policy_l1_distance, random_mdp, uniform_policy
from dqlambda.operators import TraceSpec


@pytest.fixture
def mdp():
    return random_mdp(3, 4, 3)


def _pi_mu(mdp, alpha):
    mu = uniform_policy(mdp)
    return mix_policies(alpha, greedy_policy(mdp.reward), mu), mu


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(mode="other")
    with pytest.raises(ValueError):
        RunConfig(oracle="nope")
    with pytest.raises(ValueError):
        RunConfig(k_max=0)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})


def test_config_round_trip():
    cfg = RunConfig(trace=TraceSpec.retrace(0.7), tracked=(1, 2), m=15)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_uncovered_grid_rejected(mdp):
    with pytest.raises(ValueError):
        make_grid(mdp, RunConfig(v_min=0.0, v_max=0.1))
    g = make_grid(mdp, RunConfig(v_min=0.0, v_max=0.1, allow_uncovered=True))
    assert g.m == 10


def test_one_step_decay(mdp):
    # distance to the projected fixed point contracts at least by sqrt(gamma) per step
    cfg = RunConfig(trace=TraceSpec.one_step(), oracle="dp", k_max=30, m=15)
    pi, mu = _pi_mu(mdp, 0.5)
    logs = evaluate(mdp, pi, pi, cfg)
    d = np.array([log.sup_l2_to_oracle for log in logs])
    ok = d[:-1] > 1e-12
    assert np.all(d[1:][ok] <= math.sqrt(mdp.gamma) * d[:-1][ok] + 1e-12)


def test_in_radius_final_distance_below_bound(mdp):
    lam = 0.5
    pi, mu = _pi_mu(mdp, 0.0)
    eps_max = radius_l2(mdp.gamma, lam)
    alpha = 0.8 * eps_max / policy_l1_distance(greedy_policy(mdp.reward), mu)
    pi = mix_policies(min(alpha, 1.0), greedy_policy(mdp.reward), mu)
    grid = grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, 15)
    tr = figure1_trace(mdp, pi, mu, lam, grid, 80, target_refine=40)
    assert math.isfinite(tr.bound)
    assert tr.sup_l2_to_target[-1] <= tr.bound + 1e-9


def test_off_policy_equals_on_policy_when_pi_is_mu(mdp):
    pi, _ = _pi_mu(mdp, 0.4)
    base = RunConfig(oracle="dp", k_max=15, m=12)
    a = evaluate(mdp, pi, pi, RunConfig.from_dict({**base.to_dict(), "trace": TraceSpec.off_policy(0.6)}))
    b = evaluate(mdp, pi, pi, RunConfig.from_dict({**base.to_dict(), "trace": TraceSpec.on_policy(0.6)}))
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.row(), y.row(), atol=1e-10)


def test_control_alpha_zero_is_evaluation_of_mu(mdp):
    mu = uniform_policy(mdp)
    cfg = RunConfig(mode="control", alpha=0.0, trace=TraceSpec.off_policy(0.5), oracle="dp", k_max=10, m=12)
    res_c = control(mdp, mu, cfg)
    cfg_e = RunConfig(trace=TraceSpec.off_policy(0.5), oracle="dp", k_max=10, m=12)
    oracle = run_evaluate(mdp, mu, mu, RunConfig(oracle="dp", m=12, k_max=1)).oracle
    res_e = evaluate(mdp, mu, mu, cfg_e)
    # same iterates; the two runs only differ in which oracle they are measured against
    steps_c = [log.step_change for log in res_c]
    steps_e = [log.step_change for log in res_e]
    np.testing.assert_allclose(steps_c, steps_e, atol=1e-12)
    assert all(log.target_policy_epsilon == 0.0 for log in res_c)
    assert oracle.masses.shape == (4, 3, 12)


@pytest.mark.parametrize("trace", [TraceSpec.off_policy(0.7), TraceSpec.retrace(0.7), TraceSpec.peng(0.7)])
def test_mass_conserved(mdp, trace):
    pi, mu = _pi_mu(mdp, 0.6)
    logs = evaluate(mdp, pi, mu, RunConfig(trace=trace, oracle="dp", k_max=20, m=12))
    assert max(log.total_mass_error for log in logs) < 1e-9


def test_step_change_envelope(mdp):
    lam = 0.5
    mu = uniform_policy(mdp)
    pi = mix_policies(0.05, greedy_policy(mdp.reward), mu)
    b2 = beta_p(mdp.gamma, lam, policy_l1_distance(pi, mu), 2)
    assert b2 < 1
    logs = evaluate(mdp, pi, mu, RunConfig(trace=TraceSpec.off_policy(lam), oracle="dp", k_max=25, m=12))
    steps = [log.step_change for log in logs]
    for prev, cur in zip(steps, steps[1:]):
        assert cur <= b2 * prev + 1e-9


def test_stop_tol(mdp):
    pi, _ = _pi_mu(mdp, 0.5)
    logs = evaluate(mdp, pi, pi, RunConfig(oracle="dp", k_max=500, stop_tol=1e-6, m=10))
    assert len(logs) < 500 and logs[-1].step_change < 1e-6


def test_deterministic(mdp):
    pi, mu = _pi_mu(mdp, 0.5)
    cfg = RunConfig(trace=TraceSpec.retrace(0.8), oracle="mc", oracle_n_traj=50, k_max=5, seed=4)
    assert logs_to_csv(evaluate(mdp, pi, mu, cfg)) == logs_to_csv(evaluate(mdp, pi, mu, cfg))


def test_csv_round_trip(mdp):
    pi, mu = _pi_mu(mdp, 0.5)
    logs = evaluate(mdp, pi, mu, RunConfig(trace=TraceSpec.off_policy(0.3), oracle="dp", k_max=6))
    text = logs_to_csv(logs)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert logs_from_csv(text) == logs


def test_summary(mdp):
    pi, mu = _pi_mu(mdp, 0.5)
    cfg = RunConfig(oracle="dp", k_max=8)
    logs = evaluate(mdp, pi, mu, cfg)
    s = summarize(logs)
    assert s["iterations"] == 8 and not s["diverged"]
    assert '"summary"' in summary_json(cfg, logs)


def test_tracked_pair_validated(mdp):
    pi, mu = _pi_mu(mdp, 0.5)
    with pytest.raises(ValueError):
        evaluate(mdp, pi, mu, RunConfig(oracle="dp", tracked=(9, 0)))


def test_figure1_trace_starts_nonnegative(mdp):
    pi, mu = _pi_mu(mdp, 0.05)
    grid = grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, 11)
    tr = figure1_trace(mdp, pi, mu, 0.5, grid, 5, target_refine=10)
    assert tr.masses.shape == (6, 11) and tr.k_max == 5
    assert tr.masses[0].min() >= 0
    np.testing.assert_allclose(tr.total_mass, 1.0, atol=1e-9)
    assert tr.to_csv().count("\n") == 1 + 6 * 11


def test_figure1_warns_outside_radius(mdp):
    mu = uniform_policy(mdp)
    pi = greedy_policy(mdp.reward)
    grid = grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, 8)
    with pytest.warns(UserWarning):
        figure1_trace(mdp, pi, mu, 0.95, grid, 2, target_refine=4)
