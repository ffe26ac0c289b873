"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible even
under capture) before asserting, so ``pytest -v`` output doubles as the
acceptance report.
"""

import json
import time
import warnings

import numpy as np
import pytest
from scipy import stats

from covertopt.cli import main
from covertopt.cmdp import (CmdpSpec, check_queue_stability, lp_occupation_oracle, reference_cmdp, simulate_cmdp,
                            solve_cmdp, tracking_specs)
from covertopt.covert_sgd import (OBFUSCATING, TRUE, always_learn, eavesdropper_estimate, final_estimate_probs,
                                  quadratic, required_updates, run_protocol)
from covertopt.fedsim import FedConfig, compare_policies
from covertopt.finite_mdp import (AssumptionWarning, brute_force_optimal, reference_finite_spec, random_instance,
                                  solve_backward_dp, verify_submodularity, verify_threshold_structure,
                                  verify_value_monotonicity)
from covertopt.oracle import OracleChain, reference_chain
from covertopt.spga import SpgaConfig, extract_thresholds, run_spga

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return _report


def test_criterion_1_dp_matches_enumeration(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, count = 0.0, 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        while count < 60:
            W, M = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            N = int(rng.integers(M, M + 4))
            if W * (M + 1) * N > 20:
                continue
            spec = random_instance(rng, W, M, N, enforce_assumptions=bool(count % 2))
            dp, bf = solve_backward_dp(spec), brute_force_optimal(spec)
            worst = max(worst, float(np.abs(dp.values - bf.values).max()))
            count += 1
    secs = time.perf_counter() - t0
    report(1, worst <= 1e-9 and secs < 60, f"{count} instances, max |V_dp - V_enum| = {worst:.2e}, {secs:.1f}s")


def test_criterion_2_threshold_structure(report):
    t0 = time.perf_counter()
    fails = 0
    for seed in range(100):
        sol = solve_backward_dp(random_instance(seed))
        if not (verify_threshold_structure(sol).passed and verify_value_monotonicity(sol).passed
                and verify_submodularity(sol).passed):
            fails += 1
    reference = solve_backward_dp(reference_finite_spec())
    reference_thr = verify_threshold_structure(reference)
    ordered = solve_backward_dp(reference_finite_spec(privacy=(1.8, 0.8, 0.3)))
    ordered_ok = (verify_threshold_structure(ordered).passed
                  and verify_value_monotonicity(ordered, check_oracle=True).passed
                  and verify_submodularity(ordered).passed)
    secs = time.perf_counter() - t0
    ok = fails == 0 and not reference_thr.violations and ordered_ok and secs < 120
    report(2, ok, f"fuzz failures {fails}/100, federated-cost violations {len(reference_thr.violations)}, "
                  f"ordered-cost checks {'ok' if ordered_ok else 'failed'}, {secs:.1f}s")


def test_criterion_3_cmdp_cross_check(report):
    t0 = time.perf_counter()
    spec = reference_cmdp()
    sol = solve_cmdp(spec)
    lp = lp_occupation_oracle(spec)
    gap = abs(lp.objective - sol.evaluation.objective)
    # the constraint is slack here: the unconstrained optimum already learns whenever work is pending
    meets = sol.learning_cost <= spec.constraint + 1e-6
    secs = time.perf_counter() - t0
    report(3, meets and gap <= 1e-6 and secs < 60,
           f"learning cost {sol.learning_cost:.3g} <= {spec.constraint}, objective {sol.evaluation.objective:.9f}, "
           f"LP gap {gap:.1e}, {secs:.1f}s")


def _random_stable_spec(rng):
    while True:
        W = 3
        P = rng.dirichlet(np.ones(W), size=W)
        g = np.sort(rng.uniform(0.6, 1.0, W))
        delta = float(rng.uniform(0.05, 0.15))
        Ma = int(rng.integers(1, 3))
        spec = CmdpSpec(OracleChain(P, g), [[0.0] * W, list(np.sort(rng.uniform(0.1, 2.0, W)))],
                        [[0.6] * W, [0.0] * W], 0.2, delta, Ma, int(np.ceil(10 * Ma / delta)), 100.0)
        if check_queue_stability(spec).stable_guaranteed:
            return spec


def test_criterion_4_queue_stability(report):
    def lemma(delta, Ma, g_min, Lam=0.2, l0=0.6):
        spec = reference_cmdp(chain=OracleChain([[1.0]], [g_min]), privacy_cost=[[0.0], [1.0]],
                          learning_cost=[[l0], [0.0]], constraint=Lam, arrival_prob=delta, arrival_batch=Ma)
        return check_queue_stability(spec)

    a = lemma(0.0, 4, 0.1)
    b = check_queue_stability(reference_cmdp())
    c = lemma(0.01, 2, 0.5)
    arith = (a.stable_guaranteed and a.lhs == 0.0
             and not b.stable_guaranteed and b.lhs == pytest.approx(4.0) and b.rhs == pytest.approx(2 / 3)
             and c.stable_guaranteed and c.lhs == pytest.approx(0.04))
    rng = np.random.default_rng(7)
    overflows, worst = 0, 0.0
    for _ in range(10):
        spec = _random_stable_spec(rng)
        sol = solve_cmdp(spec)
        sim = simulate_cmdp(spec, sol.table, 100_000, int(rng.integers(2**31)), runs=20)
        overflows += int(sim.overflows.sum())
        worst = max(worst, sim.max_queue.max() / spec.queue_cap)
    report(4, arith and overflows == 0,
           f"lemma arithmetic {'exact' if arith else 'wrong'}, 10 certified specs x 20 seeds x 1e5 steps: "
           f"{overflows} overflows, max queue {worst:.0%} of cap")


def test_criterion_5_spga_convergence(report):
    t0 = time.perf_counter()
    spec = reference_cmdp()
    cfg = SpgaConfig(iterations=5000, runs=100, kappa0=0.5, rho=20.0, xi0=10.0, rollout_length=100)
    res = run_spga(cfg, spec)
    est = extract_thresholds(res.mean_params())
    sol = solve_cmdp(spec)
    diff = np.abs(est.phi2[:2] - sol.policy.phi2[:2])
    secs = time.perf_counter() - t0
    ok = diff.max() <= 3 and np.all(est.phi2[2] == 0) and secs < 600
    report(5, ok, f"extracted phi2 {est.phi2.tolist()} vs solver {sol.policy.phi2.tolist()}, "
                  f"max diff states 1-2 = {diff.max()}, {secs:.0f}s")


def test_criterion_6_tracking(report):
    before, after = tracking_specs()
    cfg = SpgaConfig(iterations=4000, runs=100, kappa0=0.05, constant_step=True, rho=20.0, xi0=10.0,
                     switches=[(2001, after)])
    res = run_spga(cfg, before)
    target = solve_cmdp(after).policy.phi2[0, 0]
    path = res.mean_trace[2000:, 1, 0, 0]
    direction = np.sign(target - path[0])
    rho, p = stats.spearmanr(np.arange(path.size), path)
    ok = direction != 0 and np.sign(rho) == direction and p < 0.05
    report(6, ok, f"state-1 theta2 {path[0]:.2f} -> {path[-1]:.2f} (new threshold {target}), "
                  f"Spearman {rho:+.3f}, p = {p:.1e}")


def test_criterion_7_convergence_rate(report):
    t0 = time.perf_counter()
    d, eps, sigma_sq = 5, 0.05, 0.6
    obj = quadratic(np.zeros(d), -0.3, 0.3)
    chain = reference_chain(noise_std=[0.5, np.sqrt(0.02), np.sqrt(0.02)])
    M = required_updates(1.0, np.sqrt(sigma_sq), eps)
    vals = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(obj.lo, obj.hi)
        st = run_protocol(obj, chain, x0, sigma_sq, always_learn, 100 * M, rng, stop_after=M).state
        gn = np.array([obj.gradient(h) @ obj.gradient(h) for h in st.history])
        vals.append(final_estimate_probs(st) @ gn)
    mean = float(np.mean(vals))
    secs = time.perf_counter() - t0
    report(7, mean <= eps and secs < 60, f"M = {M}, mean E||grad f||^2 = {mean:.4f} <= {eps}, {secs:.1f}s")


def test_criterion_8_obfuscation_majority(report):
    t0 = time.perf_counter()
    obj = quadratic(np.full(3, 0.6), -1, 1)
    chain = OracleChain([[1.0]], [1.0], [0.05])
    rng = np.random.default_rng(11)
    fails = {OBFUSCATING: 0, TRUE: 0}
    for i in range(20_000):
        want = OBFUSCATING if i % 2 == 0 else TRUE
        N = int(rng.integers(3, 40))
        while True:
            acts = (rng.random(N) < 0.5).astype(int)
            learn = int(acts.sum())
            if (want == TRUE and 2 * learn > N) or (want == OBFUSCATING and 2 * learn < N):
                break
        x0 = obj.project(np.full(3, 0.6) + rng.uniform(-0.1, 0.1, 3))
        it = iter(acts)
        st = run_protocol(obj, chain, x0, 1.0, lambda o, m, left: next(it), N, rng).state
        # the eavesdropper only sees the untagged queries
        rep = eavesdropper_estimate(st.log.queries())
        members = np.array([r.query for r in st.log.subsequence(want)])
        if not np.any(np.all(members == rep.estimate, axis=1)):
            fails[want] += 1
    secs = time.perf_counter() - t0
    report(8, fails[OBFUSCATING] == 0 and fails[TRUE] == 0,
           f"10^4 obfuscating-majority runs: {fails[OBFUSCATING]} misses; "
           f"10^4 learning-majority runs: {fails[TRUE]} misses, {secs:.1f}s")


def test_criterion_9_federated_table(report):
    t0 = time.perf_counter()
    cfg = FedConfig(calibration_rounds=500)
    _, finals = compare_policies(cfg, range(20), policies=("greedy", "optimal"))
    m = {k: v.mean(axis=0) for k, v in finals.items()}
    greedy_s1 = m[("greedy", "no-data")][1]
    opt_s1 = m[("optimal", "no-data")][1]
    opt_s2 = m[("optimal", "subset-data")][1]
    learner_opt = m[("optimal", "no-data")][0]
    learner_greedy = m[("greedy", "no-data")][0]
    a = opt_s1 <= greedy_s1 - 0.15
    b = opt_s1 < opt_s2 < learner_opt
    c = abs(learner_opt - learner_greedy) <= 0.05
    secs = time.perf_counter() - t0
    report(9, a and b and c and secs < 900,
           f"eavesdropper S1 greedy {greedy_s1:.3f} / optimal {opt_s1:.3f}, S2 optimal {opt_s2:.3f}, "
           f"learner optimal {learner_opt:.3f} / greedy {learner_greedy:.3f}, {secs:.0f}s")


CLI_CASES = {
    "solve-mdp": {"finite_mdp": {"preset": "reference"}},
    "solve-cmdp": {"cmdp": {"preset": "reference"}},
    "run-spga": {"cmdp": {"preset": "reference"}, "spga": {"iterations": 50, "runs": 5}},
    "run-covert": {"covert": {"dim": 3, "sigma_sq": 0.6, "eps": 0.2, "noise_std": [0.5, 0.1, 0.1], "runs": 5}},
    "cost-sweep": {"cmdp": {"preset": "reference", "queue_cap": 12}, "sweep": {"scales": [0, 1, 10], "steps": 500,
                                                                            "runs": 3}},
    "run-fedsim": {"fedsim": {"calibration_rounds": 200}, "seeds": 2},
}


def test_criterion_10_cli_determinism(report, tmp_path):
    differing = []
    for cmd, cfg in CLI_CASES.items():
        path = tmp_path / f"{cmd}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for rep in range(2):
            out = tmp_path / f"{cmd}-{rep}"
            assert main([cmd, "--config", str(path), "--seed", "3", "--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
        if outs[0] != outs[1]:
            differing.append(cmd)
    report(10, not differing, f"{len(CLI_CASES)} subcommands rerun; differing outputs: {differing or 'none'}")
