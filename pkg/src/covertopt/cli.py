"""Command-line experiment runner.

Every subcommand reads a JSON config, writes CSV/JSON into ``--out`` and
stamps each file with the SHA-256 of the effective config and the seed.
Nothing time- or host-dependent is written, so reruns are byte-identical.

Exit codes: 0 success, 1 runtime or solver error, 2 config error,
3 structure violation under ``--strict``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import cmdp as C
from . import covert_sgd as cs
from . import fedsim as fs
from . import finite_mdp as fm
from . import spga as sp
from .oracle import OracleChain, reference_chain

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_STRICT = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# --- config helpers ------------------------------------------------------------

def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _stamp(cfg: dict, seed: int) -> list:
    return [f"config_sha256={config_hash(cfg)}", f"seed={seed}"]


def _write_json(path: Path, payload: dict, cfg: dict, seed: int):
    out = {"config_sha256": config_hash(cfg), "seed": seed, **payload}
    path.write_text(json.dumps(out, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _block(cfg: dict, name: str, required: bool = True) -> dict:
    if name not in cfg:
        if required:
            raise ConfigError(f"config is missing the {name!r} block")
        return {}
    b = cfg[name]
    if not isinstance(b, dict):
        raise ConfigError(f"{name!r} must be a JSON object")
    return b


def cmdp_from_block(b: dict) -> C.CmdpSpec:
    """``{"preset": "reference" | "tracking-before" | "tracking-after", overrides...}`` or a full spec."""
    b = dict(b)
    preset = b.pop("preset", None)
    if "chain" in b:
        b["chain"] = OracleChain.from_dict(b["chain"])
    if preset is None:
        return C.CmdpSpec(**b)
    if preset == "reference":
        return C.reference_cmdp(**b)
    if preset in ("tracking-before", "tracking-after"):
        pair = C.tracking_specs()
        spec = pair[0] if preset == "tracking-before" else pair[1]
        return spec.with_(**b) if b else spec
    raise ConfigError(f"unknown CMDP preset {preset!r}")


def finite_from_block(b: dict) -> fm.FiniteMdpSpec:
    b = dict(b)
    preset = b.pop("preset", None)
    if preset is None:
        return fm.FiniteMdpSpec.from_dict(b)
    if preset != "reference":
        raise ConfigError(f"unknown finite MDP preset {preset!r}")
    return fm.reference_finite_spec(**b)


def _dataclass_from(cls, b: dict, **extra):
    names = {f.name for f in fields(cls)}
    unknown = set(b) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields {sorted(unknown)}")
    return cls(**{**b, **extra})


# --- subcommands ---------------------------------------------------------------

def cmd_solve_mdp(cfg, seed, runs, out: Path, strict: bool) -> int:
    spec = finite_from_block(_block(cfg, "finite_mdp"))
    sol = fm.solve_backward_dp(spec)
    thr = fm.verify_threshold_structure(sol)
    mono = fm.verify_value_monotonicity(sol)
    sub = fm.verify_submodularity(sol)
    sol.write_csv(out / "policy.csv", _stamp(cfg, seed))
    report = {
        "threshold_structure": {"passed": thr.passed, "violations": [str(v) for v in thr.violations]},
        "value_monotonicity": {"passed": mono.passed, "violations": [str(v) for v in mono.violations]},
        "submodularity": {"passed": sub.passed, "violations": [str(v) for v in sub.violations]},
        "thresholds": json.loads(thr.thresholds_json()),
        "learning_actions": int(sol.policy[1:].sum()),
        "value_at_start": float(sol.values[spec.horizon, 0, spec.updates_needed]),
    }
    _write_json(out / "structure.json", report, cfg, seed)
    ok = thr.passed and mono.passed and sub.passed
    print(f"solve-mdp: structure {'ok' if ok else 'VIOLATED'}; learning entries {report['learning_actions']}")
    return EXIT_STRICT if strict and not ok else EXIT_OK


def cmd_solve_cmdp(cfg, seed, runs, out: Path, strict: bool) -> int:
    spec = cmdp_from_block(_block(cfg, "cmdp"))
    sol = C.solve_cmdp(spec)
    report = sol.report(spec)
    if cfg.get("lp_check", True):
        lp = C.lp_occupation_oracle(spec)
        report["lp_objective"] = lp.objective
        report["lp_gap"] = abs(lp.objective - sol.evaluation.objective)
    report["constraint"] = spec.constraint
    report["constraint_slack"] = spec.constraint - sol.learning_cost
    stab = C.check_queue_stability(spec)
    report["stability"] = {"stable_guaranteed": stab.stable_guaranteed, "lhs": stab.lhs, "rhs": stab.rhs,
                           "note": stab.note}
    if sol.policy is not None:
        (out / "policy.json").write_text(C.policy_json(spec, sol.policy) + "\n")
    else:
        _write_json(out / "policy.json", {"learn_table": sol.table}, cfg, seed)
    _write_json(out / "report.json", report, cfg, seed)
    monotone = sol.policy is not None
    print(f"solve-cmdp: privacy {sol.privacy_cost:.6g} learning {sol.learning_cost:.6g} "
          f"lambda {sol.lam2:.6g} p {sol.mix:.6g}")
    return EXIT_STRICT if strict and not monotone else EXIT_OK


def cmd_run_spga(cfg, seed, runs, out: Path, strict: bool) -> int:
    spec = cmdp_from_block(_block(cfg, "cmdp"))
    b = dict(_block(cfg, "spga", required=False))
    switches = []
    for sw in b.pop("switches", []):
        switches.append((int(sw["at"]), cmdp_from_block(sw["cmdp"])))
    conf = _dataclass_from(sp.SpgaConfig, b, seed=seed, runs=runs or b.get("runs", 100), switches=switches)
    res = sp.run_spga(conf, spec)
    res.write_trace_csv(out / "trace.csv", _stamp(cfg, seed), spec.arrival_batch)
    final_spec = switches[-1][1] if switches else spec
    est = sp.extract_thresholds(res.mean_params())
    report = {"extracted": est.to_dict(final_spec), "xi_final_mean": float(res.xi.mean())}
    if cfg.get("compare", True):
        sol = C.solve_cmdp(final_spec)
        if sol.policy is None:
            raise C.SolverError("solver policy has no threshold form to compare against")
        report["solver"] = sol.policy.to_dict(final_spec)
        report["phi2_abs_diff"] = np.abs(est.phi2 - sol.policy.phi2).tolist()
    _write_json(out / "summary.json", report, cfg, seed)
    print(f"run-spga: {conf.iterations} iterations x {conf.runs} runs")
    return EXIT_OK


def _covert_schedule(b: dict, rounds: int):
    """Learn on every ``learn_every``-th round (1 is the greedy schedule)."""
    every = int(b.get("learn_every", 1))
    if every < 1:
        raise ConfigError("learn_every must be positive")
    return lambda o, m, left: int((rounds - left) % every == 0)


def cmd_run_covert(cfg, seed, runs, out: Path, strict: bool) -> int:
    b = _block(cfg, "covert")
    d = int(b.get("dim", 5))
    x_star = np.asarray(b.get("x_star", [0.0] * d), dtype=float)
    obj = cs.quadratic(x_star, b.get("lo", -0.3), b.get("hi", 0.3), b.get("L", 1.0))
    chain = OracleChain.from_dict(b["chain"]) if "chain" in b else reference_chain(b.get("noise_std"))
    sigma_sq = float(b.get("sigma_sq", 0.6))
    eps = float(b.get("eps", 0.05))
    M = cs.required_updates(obj.L, np.sqrt(sigma_sq), eps, b.get("c", 1.0))
    rounds = int(b.get("max_rounds", 100 * M))
    mode = b.get("mode", "mirror")
    R = runs or int(b.get("runs", 1))
    rows, first_log = [], None
    for i in range(R):
        rng = np.random.default_rng(seed + i)
        if "x0_radius" in b:
            r0 = float(b["x0_radius"])
            x0 = obj.project(x_star + rng.uniform(-r0, r0, d))
        else:
            x0 = rng.uniform(obj.lo, obj.hi)
        res = cs.run_protocol(obj, chain, x0, sigma_sq, _covert_schedule(b, rounds), rounds, rng, mode=mode,
                              stop_after=M, eps=eps)
        st = res.state
        if st.m == 0:
            raise cs.NoSuccessfulUpdatesError("run finished without a successful update")
        probs = cs.final_estimate_probs(st)
        gn = np.array([obj.gradient(h) @ obj.gradient(h) for h in st.history])
        xh = cs.pick_final_estimate(st, rng)
        rep = cs.eavesdropper_estimate(st.log, partition=b.get("partition", "nearest"))
        rows.append({"run": i, "successes": st.m, "queries": len(st.log),
                     "learning_queries": int(res.actions.sum()),
                     "expected_grad_norm_sq": float(probs @ gn),
                     "sampled_grad_norm_sq": float(obj.gradient(xh) @ obj.gradient(xh)),
                     "eavesdropper_posterior": rep.posterior, "eavesdropper_tag": rep.chosen_tag,
                     "partition_mismatches": rep.mismatches})
        if first_log is None:
            first_log = st.log
    first_log.write_csv(out / "queries.csv", _stamp(cfg, seed))
    mean_g = float(np.mean([r["expected_grad_norm_sq"] for r in rows]))
    report = {"required_updates": M, "eps": eps, "mean_expected_grad_norm_sq": mean_g,
              "within_eps": mean_g <= eps, "runs": rows,
              "step_lengths": cs.step_length_stats(first_log)}
    _write_json(out / "report.json", report, cfg, seed)
    print(f"run-covert: M={M} mean E||grad||^2={mean_g:.4g} (eps {eps:g})")
    return EXIT_STRICT if strict and mean_g > eps else EXIT_OK


def cmd_cost_sweep(cfg, seed, runs, out: Path, strict: bool) -> int:
    spec = cmdp_from_block(_block(cfg, "cmdp"))
    b = _block(cfg, "sweep", required=False)
    scales = b.get("scales", [0.0, 0.5, 1, 2, 5, 10, 20, 50, 100, 200])
    steps = int(b.get("steps", 1000))
    R = runs or int(b.get("runs", 20))
    base = spec.privacy_cost[1]
    lines = []
    for s in scales:
        sp_ = spec.with_(privacy_cost=np.vstack([np.zeros_like(base), float(s) * base]))
        sol = C.solve_cmdp(sp_)
        sim = C.simulate_cmdp(sp_, sol.table, steps, seed, runs=R)
        exact = float(sol.evaluation.stationary.reshape(-1) @ sol.table.reshape(-1))
        lines.append((float(s), float(sim.learn_fraction.mean()), exact, sol.lam2, sol.privacy_cost,
                      sol.learning_cost))
    with open(out / "sweep.csv", "w", newline="") as fh:
        for h in _stamp(cfg, seed):
            fh.write(f"# {h}\n")
        fh.write("cost_scale,learn_fraction_sim,learn_fraction_exact,lambda,privacy_cost,learning_cost\n")
        for row in lines:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print("cost-sweep: " + " ".join(f"{r[0]:g}:{r[2]:.3f}" for r in lines))
    return EXIT_OK


def cmd_run_fedsim(cfg, seed, runs, out: Path, strict: bool) -> int:
    fb = dict(_block(cfg, "fedsim", required=False))
    fb.pop("seed", None)
    conf = fs.FedConfig.from_dict({**fb, "seed": seed})
    eaves = _dataclass_from(fs.EavesdropperConfig, _block(cfg, "eavesdropper", required=False))
    R = runs or int(cfg.get("seeds", 20))
    seeds = [seed + i for i in range(R)]
    rows, finals = fs.compare_policies(conf, seeds, eaves=eaves)
    fs.write_comparison_csv(rows, out / "table.csv", _stamp(cfg, seed))
    trace = fs.run_experiment(conf, replace(eaves, scenario="no-data"), "optimal", np.random.default_rng(seed))
    trace.write_csv(out / "trace_optimal.csv", _stamp(cfg, seed))
    with open(out / "per_seed.csv", "w", newline="") as fh:
        for h in _stamp(cfg, seed):
            fh.write(f"# {h}\n")
        fh.write("policy,scenario,seed,learner_acc,eavesdropper_acc,finetuned_acc,learning_rounds,successes\n")
        for (pol, sc), arr in sorted(finals.items()):
            for s, row in zip(seeds, arr):
                fh.write(",".join([pol, sc, str(s)] + [repr(float(v)) for v in row]) + "\n")
    for r in rows:
        print(f"run-fedsim: {r.policy:8s} {r.scenario:12s} learner {r.learner_acc:.3f} "
              f"eavesdropper {r.eavesdropper_acc:.3f}")
    return EXIT_OK


COMMANDS = {
    "solve-mdp": cmd_solve_mdp,
    "solve-cmdp": cmd_solve_cmdp,
    "run-spga": cmd_run_spga,
    "run-covert": cmd_run_covert,
    "cost-sweep": cmd_cost_sweep,
    "run-fedsim": cmd_run_fedsim,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="covertopt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
        s.add_argument("--runs", type=int, default=None, help="runs to average where applicable")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--strict", action="store_true", help="exit 3 on structure violations")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    if seed < 0 or (args.runs is not None and args.runs < 1):
        print("config error: seed must be >= 0 and runs >= 1", file=sys.stderr)
        return EXIT_CONFIG
    effective = {**cfg, "seed": seed, "command": args.command}
    if args.runs is not None:
        effective["runs"] = args.runs
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](effective, seed, args.runs, out, args.strict)
    except (ConfigError, fs.ConfigError, TypeError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (C.SolverError, cs.NoSuccessfulUpdatesError, fm.InstanceTooLargeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # validation failures in specs are ValueError subclasses
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
