import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from covertopt.cmdp import AugStateC, evaluate_policy, reference_cmdp
from covertopt.oracle import OracleChain
from covertopt.spga import (SigmoidPolicyParams, SpgaConfig, estimate_avg_cost, extract_thresholds,
                            policy_prob, primal_dual_update, run_spga, sigmoid_tables, spga_iterate,
                            spsa_minimize)


def params1(t1, t2, h, tau=0.5):
    return SigmoidPolicyParams([[t1, t1]], [[t2, t2]], [[h, h]], tau)


# --- policy -----------------------------------------------------------------------

def test_midpoint_probability():
    assert policy_prob(params1(7, 7, 0.4), AugStateC(1, 7, 0)) == pytest.approx(0.5)


def test_saturation():
    p = params1(3, 5, 0.5, tau=0.1)
    assert policy_prob(p, AugStateC(1, 7, 0)) > 1 - 1e-6


def test_empty_queue_never_learns():
    assert policy_prob(params1(-5, -5, 0.5), AugStateC(1, 0, 0)) == 0.0


def test_small_temperature_limit():
    p = params1(2, 5, 0.3, tau=1e-3)
    assert policy_prob(p, AugStateC(1, 3, 0)) == pytest.approx(0.3)
    assert policy_prob(p, AugStateC(1, 6, 0)) == pytest.approx(1.0)
    assert policy_prob(p, AugStateC(1, 1, 0)) == pytest.approx(0.0)


def test_params_validation():
    with pytest.raises(ValueError):
        params1(1, 2, 1.5)
    with pytest.raises(ValueError):
        params1(1, 2, 0.5, tau=0.0)
    with pytest.raises(ValueError):
        SigmoidPolicyParams([[1, 2]], [[1]], [[0.5, 0.5]])


def test_tables_match_pointwise_probability():
    spec = reference_cmdp(queue_cap=12)
    rng = np.random.default_rng(3)
    p = SigmoidPolicyParams(rng.uniform(0, 12, (3, 2)), rng.uniform(0, 12, (3, 2)), rng.uniform(0, 1, (3, 2)))
    table = p.learn_table(spec)
    for o in (1, 2, 3):
        for a in (0, 1):
            for q in range(13):
                assert table[o - 1, q, a] == pytest.approx(policy_prob(p, AugStateC(o, q, 4 * a)))


@given(arrays(float, (3, 1, 2), elements=st.floats(-5, 45)), st.floats(0, 1), st.floats(0.05, 3))
def test_probability_nondecreasing_in_queue(theta, h, tau):
    stack = np.concatenate([theta[:2], np.full((1, 1, 2), h)])
    table = sigmoid_tables(stack, tau, 40)
    assert np.all(np.diff(table[0, 1:], axis=0) >= -1e-12)


@given(st.integers(0, 30), st.integers(0, 30), st.floats(0, 1))
def test_sharp_policy_close_to_hard_threshold(a, b, h):
    lo, hi = min(a, b), max(a, b)
    p = params1(lo - 0.5, hi - 0.5, h, tau=0.05)
    spec = reference_cmdp()
    soft = p.learn_table(spec)[0, :, 0]
    hard = extract_thresholds(params1(lo, hi, h)).learn_table(spec)[0, :, 0]
    # both actions are Bernoulli, so per-state TV is the gap in learn probability
    assert np.abs(soft - hard).max() < 1e-3


# --- extraction -------------------------------------------------------------------

def test_extract_rounding():
    pol = extract_thresholds(params1(2.4, 4.6, 0.3))
    assert pol.phi1[0, 0] == 2 and pol.phi2[0, 0] == 5 and pol.p[0, 0] == pytest.approx(0.3)


def test_extract_negative_clamps():
    assert extract_thresholds(params1(-5.0, -3.1, 0.5)).phi2[0, 0] == 0


def test_extract_equal_thresholds_empty_band():
    pol = extract_thresholds(params1(6.2, 6.2, 0.8))
    assert pol.phi1[0, 0] == pol.phi2[0, 0] == 6


def test_extract_swapped_roles():
    pol = extract_thresholds(params1(8.0, 3.0, 0.2))
    assert (pol.phi1[0, 0], pol.phi2[0, 0]) == (3, 8)
    assert pol.p[0, 0] == pytest.approx(0.8)


# --- cost estimates ---------------------------------------------------------------

def test_obfuscating_policy_has_zero_privacy_cost():
    spec = reference_cmdp(overflow_cost=0.0)
    p = SigmoidPolicyParams.constant(3, 1000.0, 1000.0)
    assert estimate_avg_cost("privacy", p, spec, 500, 0, initial=(3, 40, 0)) == pytest.approx(0.0, abs=1e-9)


def test_no_arrivals_from_empty_queue():
    spec = reference_cmdp(arrival_prob=0.0)
    p = SigmoidPolicyParams.constant(3, 0.0, 0.0)
    assert estimate_avg_cost("privacy", p, spec, 200, 1) == 0.0
    assert estimate_avg_cost("learning", p, spec, 200, 1) == 0.0


def test_estimate_deterministic_and_validated():
    spec = reference_cmdp()
    p = SigmoidPolicyParams.constant(3, 5.0, 10.0)
    assert estimate_avg_cost("learning", p, spec, 100, 9) == estimate_avg_cost("learning", p, spec, 100, 9)
    with pytest.raises(ValueError):
        estimate_avg_cost("other", p, spec, 100, 9)
    with pytest.raises(ValueError):
        estimate_avg_cost("learning", p, spec, 0, 9)


def test_estimate_unbiased_from_stationary_start():
    spec = reference_cmdp()
    p = SigmoidPolicyParams.constant(3, 5.0, 10.0)
    ev = evaluate_policy(spec, p.learn_table(spec))
    rng = np.random.default_rng(0)
    W, Q, _ = spec.table_shape
    est = {"privacy": [], "learning": []}
    for _ in range(400):
        idx = rng.choice(ev.stationary.size, p=ev.stationary)
        o, rest = divmod(idx, Q * 2)
        q, a = divmod(rest, 2)
        start = (o + 1, q, a * spec.arrival_batch)
        seed = int(rng.integers(2**31))
        for k in est:
            est[k].append(estimate_avg_cost(k, p, spec, 100, seed, initial=start))
    for k, exact in (("privacy", ev.objective), ("learning", ev.learning_cost)):
        v = np.array(est[k])
        assert abs(v.mean() - exact) < 3 * v.std(ddof=1) / np.sqrt(v.size)


# --- update -----------------------------------------------------------------------

def _theta(W=2, R=1):
    rng = np.random.default_rng(5)
    th = np.empty((R, 3, W, 2))
    th[:, :2] = rng.uniform(3, 20, (R, 2, W, 2))
    th[:, 2] = rng.uniform(0.2, 0.8, (R, W, 2))
    return th


def test_masked_components_do_not_move():
    cfg = SpgaConfig()
    th = _theta()
    gamma = np.zeros_like(th)
    new, xi = primal_dual_update(th, np.array([1.0]), gamma, ([3.0], [1.0]), ([0.4], [0.2]), 0.1, cfg, 0.2)
    np.testing.assert_array_equal(new, th)
    assert xi[0] == pytest.approx(1.0 + 0.1 * (0.3 - 0.2))


def test_stationary_point_of_update():
    cfg = SpgaConfig()
    th = _theta()
    gamma = np.ones_like(th)
    new, xi = primal_dual_update(th, np.array([0.0]), gamma, ([0.7], [0.7]), ([0.2], [0.2]), 0.1, cfg, 0.2)
    np.testing.assert_array_equal(new, th)
    assert xi[0] == 0.0


def test_literal_floor_decays_multiplier():
    cfg = SpgaConfig(literal_xi_floor=True, rho=20.0)
    th = _theta()
    _, xi = primal_dual_update(th, np.array([4.0]), np.zeros_like(th), ([0.0], [0.0]), ([0.0], [0.0]), 0.5, cfg, 0.2)
    assert xi[0] == pytest.approx((1 - 0.5 / 20) * 4.0)


@given(st.floats(0, 50), st.floats(0, 5), st.floats(0, 5), st.floats(0.001, 1))
def test_multiplier_stays_nonnegative(xi0, l_plus, l_minus, kappa):
    cfg = SpgaConfig()
    th = _theta()
    _, xi = primal_dual_update(th, np.array([xi0]), np.ones_like(th), ([0.0], [0.0]), ([l_plus], [l_minus]),
                               kappa, cfg, 10.0)
    assert xi[0] >= 0


@given(st.integers(0, 10_000))
def test_mixing_weights_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cfg = SpgaConfig()
    th = _theta()
    gamma = (rng.random(th.shape) < 0.5).astype(float)
    c = rng.normal(0, 50, 2)
    new, _ = primal_dual_update(th, np.array([1.0]), gamma, ([c[0]], [c[1]]), ([0.0], [0.0]), 1.0, cfg, 0.2)
    assert np.all((new[:, 2] >= 0) & (new[:, 2] <= 1))


def test_masked_estimator_expectation_on_quadratic():
    # for a quadratic, component i averages to half its gradient plus a quarter of the others
    cfg = SpgaConfig(theta_gain=1.0, omega=0.1, omega_h=0.1, theta_margin=1e9)
    W = 2
    target = np.random.default_rng(1).normal(0, 1, (3, W, 2))
    theta = np.full((1, 3, W, 2), 0.5)
    grad = 2 * (theta[0] - target)
    J = lambda x: float(np.sum((x - target) ** 2))
    rng = np.random.default_rng(2)
    kappa = 1e-6
    om = cfg.omegas(W)
    est = np.zeros((3, W, 2))
    n = 10_000
    for _ in range(n):
        gamma = (rng.random((1, 3, W, 2)) < 0.5).astype(float)
        plus, minus = theta[0] + gamma[0] * om, theta[0] - gamma[0] * om
        new, _ = primal_dual_update(theta, np.array([0.0]), gamma, ([J(plus)], [J(minus)]), ([0.0], [0.0]),
                                    kappa, cfg, 0.0)
        est += (theta[0] - new[0]) / kappa
    est /= n
    expected = 0.5 * grad + 0.25 * (grad.sum() - grad)
    np.testing.assert_allclose(est, expected, rtol=0.05, atol=0.05 * np.abs(grad).max())
    # it is a descent direction
    assert np.sum(est * grad) > 0


def test_surrogate_converges_to_minimizer():
    W = 3
    rng = np.random.default_rng(4)
    target = np.empty((3, W, 2))
    target[:2] = rng.uniform(2, 20, (2, W, 2))
    target[2] = rng.uniform(0.2, 0.8, (W, 2))
    cost = lambda th: 4.0 * float(np.sum((th - target) ** 2))
    cfg = SpgaConfig(iterations=5000, kappa0=0.5, theta_gain=2.0, omega=0.5, omega_h=0.05, xi0=0.0)
    theta0 = np.concatenate([np.full((2, W, 2), 10.0), np.full((1, W, 2), 0.5)])
    final, xi = spsa_minimize(cost, theta0, cfg, 0)
    assert np.abs(final - target).max() < 0.1
    assert xi == 0.0


# --- runs -------------------------------------------------------------------------

def test_zero_iterations_returns_initial():
    spec = reference_cmdp()
    res = run_spga(SpgaConfig(iterations=0, runs=3), spec)
    np.testing.assert_array_equal(res.final[0, 0], np.full((3, 2), 10.0))
    assert res.xi_trace[0] == 10.0


def test_runs_are_independent_of_batching():
    spec = reference_cmdp()
    both = run_spga(SpgaConfig(iterations=20, runs=2, seed=7), spec)
    second = run_spga(SpgaConfig(iterations=20, runs=1, seed=8), spec)
    np.testing.assert_allclose(both.final[1], second.final[0])


def test_single_iterate_matches_batched_run():
    spec = reference_cmdp()
    cfg = SpgaConfig(iterations=1, runs=1, seed=3)
    res = run_spga(cfg, spec)
    p, xi, state, _ = spga_iterate(SigmoidPolicyParams.constant(3), 10.0, 1, cfg, spec, np.random.default_rng(3))
    np.testing.assert_allclose(p.stack(), res.final[0])
    assert xi == pytest.approx(res.xi[0])
    assert 1 <= state[0] <= 3


def test_short_run_moves_toward_learning_in_good_state():
    spec = reference_cmdp()
    res = run_spga(SpgaConfig(iterations=200, runs=20), spec)
    m = res.mean_params()
    assert m.theta2[2, 0] < 10.0
    assert np.all(res.xi_trace >= 0)


def test_regime_switch_applied():
    spec = reference_cmdp()
    other = reference_cmdp(arrival_prob=0.0)
    res = run_spga(SpgaConfig(iterations=30, runs=4, constant_step=True, kappa0=0.05, switches=[(10, other)]), spec)
    assert np.all(res.learning_trace[9:] <= res.learning_trace.max())
    single = reference_cmdp(chain=OracleChain([[1.0]], [0.5]), privacy_cost=[[0.0], [1.0]], learning_cost=[[0.6], [0.0]])
    with pytest.raises(ValueError):
        run_spga(SpgaConfig(iterations=5, runs=1, switches=[(2, single)]), spec)


def test_trace_csv(tmp_path):
    res = run_spga(SpgaConfig(iterations=3, runs=2), reference_cmdp())
    res.write_trace_csv(tmp_path / "t.csv", ["seed=0"], arrival_batch=4)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "iteration,oracle_state,arrival_state,theta1,theta2,h,xi,privacy_est,learning_est"
    assert len(lines) == 2 + 4 * 6


def test_config_validation():
    with pytest.raises(ValueError):
        SpgaConfig(omega=0)
    with pytest.raises(ValueError):
        SpgaConfig(xi0=-1)
    assert SpgaConfig(kappa0=0.5).step(5) == pytest.approx(0.1)
    assert SpgaConfig(kappa0=0.5, constant_step=True).step(5) == 0.5
