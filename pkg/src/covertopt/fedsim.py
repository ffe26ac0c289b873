"""Synthetic federated classification with Markovian client participation.

A linear logistic model is trained over simulated clients. The oracle
state sets how many clients show up; each participant contributes a random
number of batches and a round can only produce a successful update when the
pooled data clears a volume threshold. Every round the learner broadcasts
either its real model (learning) or an obfuscating model, and an
eavesdropper watching the broadcasts tries to recover the real one.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .covert_sgd import OBFUSCATING, TRUE, QueryLog, QueryRecord, eavesdropper_estimate
from .finite_mdp import FiniteMdpSpec, solve_backward_dp
from .oracle import OracleChain, reference_chain, step_oracle

AGGREGATIONS = ("gradient-average", "weight-average")
OBF_MODES = ("random-walk", "subset-data", "mirror")
SCENARIOS = ("no-data", "subset-data")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FedConfig:
    num_clients: int = 20
    fractions: tuple = (0.25, 0.5, 1.0)  # share of clients online per oracle state
    transition: tuple = ((0.8, 0.2, 0.0), (0.3, 0.5, 0.2), (0.0, 0.2, 0.8))
    data_threshold_fraction: float = 0.25
    rounds: int = 45
    updates_needed: int = 16
    aggregation: str = "gradient-average"
    dim: int = 10
    separation: float = 3.0  # distance between class means, in noise std units
    noise_std: float = 1.0
    samples_per_client: int = 50
    batch_size: int = 10
    val_size: int = 2000
    lr: float = 1.0
    local_steps: int = 5  # weight-average only
    privacy_cost: tuple = (0.3, 0.8, 1.8)
    obfuscation: str = "random-walk"  # learner's no-data obfuscation
    walk_scale: float = 0.3
    start_oracle: int = 1
    calibration_rounds: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be positive")
        if not 0 < self.data_threshold_fraction <= 1:
            raise ConfigError("data_threshold_fraction must lie in (0, 1]")
        if not self.updates_needed < self.rounds:
            raise ConfigError("updates_needed must be below rounds")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.obfuscation not in OBF_MODES:
            raise ConfigError(f"unknown obfuscation {self.obfuscation!r}")
        if len(self.fractions) != len(self.transition) or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must be in (0, 1], one per oracle state")
        if len(self.privacy_cost) != len(self.fractions):
            raise ConfigError("privacy_cost needs one entry per oracle state")
        if self.samples_per_client < self.batch_size or self.batch_size < 1:
            raise ConfigError("samples_per_client must hold at least one batch")
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "transition", tuple(tuple(float(p) for p in r) for r in self.transition))
        object.__setattr__(self, "privacy_cost", tuple(float(c) for c in self.privacy_cost))

    @property
    def total_samples(self) -> int:
        return self.num_clients * self.samples_per_client

    def chain(self, success_prob=None) -> OracleChain:
        g = np.ones(len(self.fractions)) if success_prob is None else success_prob
        return OracleChain(np.array(self.transition), g)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        d["transition"] = [list(r) for r in self.transition]
        d["privacy_cost"] = list(self.privacy_cost)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FedConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown fedsim fields {sorted(unknown)}")
        d = dict(d)
        for k in ("fractions", "privacy_cost"):
            if k in d:
                d[k] = tuple(d[k])
        if "transition" in d:
            d["transition"] = tuple(tuple(r) for r in d["transition"])
        return cls(**d)


@dataclass(frozen=True)
class EavesdropperConfig:
    scenario: str = "no-data"
    subset_fraction: float = 0.1  # of the total training volume
    positive_fraction: float = 0.1
    finetune_steps: int = 20

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not 0 <= self.subset_fraction <= 1 or not 0 <= self.positive_fraction <= 1:
            raise ConfigError("fractions must lie in [0, 1]")


# --- data --------------------------------------------------------------------

@dataclass
class Federation:
    clients: list  # (X, y) per client
    val: tuple
    direction: np.ndarray  # unit vector joining the class means
    config: FedConfig
    client_ids: list = field(default_factory=list)  # global sample ids per client

    @property
    def total(self) -> int:
        return sum(len(y) for _, y in self.clients)


def _cov_factor(noise_std, dim):
    C = np.atleast_2d(np.asarray(noise_std, dtype=float))
    if C.size == 1:
        C = float(C[0, 0]) ** 2 * np.eye(dim)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise ConfigError("degenerate covariance") from None


def sample_gaussian_classes(n, positive_fraction, direction, separation, noise_std, rng):
    """``n`` points whose positive share is exactly ``round(n * positive_fraction)``."""
    d = direction.size
    Lc = _cov_factor(noise_std, d)
    n_pos = int(round(n * positive_fraction))
    y = np.zeros(n)
    y[:n_pos] = 1.0
    y = y[rng.permutation(n)]
    std = float(np.sqrt(np.mean(np.diag(Lc @ Lc.T))))
    centers = np.outer(2 * y - 1, 0.5 * separation * std * direction)
    X = centers + rng.standard_normal((n, d)) @ Lc.T
    return X, y


def generate_federation(config: FedConfig, rng) -> Federation:
    rng = np.random.default_rng(rng)
    direction = rng.standard_normal(config.dim)
    direction /= np.linalg.norm(direction)
    n = config.total_samples
    X, y = sample_gaussian_classes(n, 0.5, direction, config.separation, config.noise_std, rng)
    Xv, yv = sample_gaussian_classes(config.val_size, 0.5, direction, config.separation, config.noise_std, rng)
    share = n // config.num_clients
    bounds = [i * share for i in range(config.num_clients)] + [n]  # remainder to the last client
    clients, ids = [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        clients.append((X[a:b], y[a:b]))
        ids.append(np.arange(a, b))
    return Federation(clients, (Xv, yv), direction, config, ids)


# --- model -------------------------------------------------------------------

def _augment(X):
    return np.hstack([X, np.ones((len(X), 1))])


def logistic_grad(w, X, y) -> np.ndarray:
    Xa = _augment(X)
    return Xa.T @ (expit(Xa @ w) - y) / len(y)


def logistic_loss(w, X, y) -> float:
    z = _augment(X) @ w
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def evaluate_accuracy(w, X, y) -> float:
    """Fraction of correct predictions, ``1{x.w + b > 0}`` against 0/1 labels."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("empty dataset")
    w = np.asarray(w, dtype=float)
    if w.size != X.shape[1] + 1:
        raise ValueError("model dimension does not match the data")
    return float(np.mean((_augment(X) @ w > 0) == (np.asarray(y) > 0.5)))


def train_centralized(config: FedConfig, fed: Federation, steps: int | None = None) -> np.ndarray:
    """Full-batch gradient descent on the pooled client data (same step count as the learner)."""
    X = np.vstack([c[0] for c in fed.clients])
    y = np.concatenate([c[1] for c in fed.clients])
    w = np.zeros(config.dim + 1)
    for _ in range(config.updates_needed if steps is None else steps):
        w = w - config.lr * logistic_grad(w, X, y)
    return w


# --- rounds ------------------------------------------------------------------

@dataclass
class RoundResult:
    participants: np.ndarray
    volume: int
    success: bool
    learner: np.ndarray
    obfuscator: np.ndarray
    broadcast: np.ndarray


def gather(fed: Federation, oracle_state: int, rng):
    """Participating clients and the data each one contributes this round."""
    cfg = fed.config
    k = max(1, int(round(cfg.fractions[oracle_state - 1] * cfg.num_clients)))
    who = np.sort(rng.choice(cfg.num_clients, size=k, replace=False))
    parts = []
    for c in who:
        X, y = fed.clients[c]
        n_batches = len(y) // cfg.batch_size
        b = int(rng.integers(0, n_batches + 1))
        idx = rng.permutation(len(y))[: b * cfg.batch_size]
        parts.append((X[idx], y[idx]))
    return who, parts


def run_round(fed: Federation, oracle_state: int, u: int, learner, obf, rng, sub_data=None,
              obf_mode: str | None = None, last_update=None) -> RoundResult:
    cfg = fed.config
    mode = cfg.obfuscation if obf_mode is None else obf_mode
    who, parts = gather(fed, oracle_state, rng)
    volume = int(sum(len(p[1]) for p in parts))
    success = bool(u == 1 and volume > 0 and volume >= cfg.data_threshold_fraction * fed.total)
    learner = np.array(learner, dtype=float)
    obf = np.array(obf, dtype=float)
    if success:
        if cfg.aggregation == "gradient-average":
            X = np.vstack([p[0] for p in parts])
            y = np.concatenate([p[1] for p in parts])
            learner = learner - cfg.lr * logistic_grad(learner, X, y)
        else:
            acc, tot = np.zeros_like(learner), 0
            for X, y in parts:
                if len(y) == 0:
                    continue
                wc = learner.copy()
                for _ in range(cfg.local_steps):
                    wc = wc - cfg.lr * logistic_grad(wc, X, y)
                acc += len(y) * wc
                tot += len(y)
            learner = acc / tot
    if u == 0:
        if mode == "random-walk":
            obf = obf + cfg.walk_scale * rng.standard_normal(obf.shape)
        elif mode == "subset-data":
            if sub_data is None:
                raise ConfigError("subset-data obfuscation needs a dataset")
            obf = obf - cfg.lr * logistic_grad(obf, *sub_data)
        elif last_update is not None:
            # reflect the learner's most recent update through the origin
            obf = obf - last_update
    return RoundResult(who, volume, success, learner, obf, learner.copy() if u == 1 else obf.copy())


def calibrate_success(fed: Federation, rounds: int | None = None, rng=None) -> np.ndarray:
    """Monte-Carlo success probability of a learning round per oracle state."""
    cfg = fed.config
    rng = np.random.default_rng(rng)
    R = cfg.calibration_rounds if rounds is None else rounds
    thr = cfg.data_threshold_fraction * fed.total
    g = np.zeros(len(cfg.fractions))
    for o in range(1, len(g) + 1):
        hits = 0
        for _ in range(R):
            _, parts = gather(fed, o, rng)
            v = sum(len(p[1]) for p in parts)
            hits += v > 0 and v >= thr
        g[o - 1] = hits / R
    return g


# --- policies ----------------------------------------------------------------

def greedy_policy(oracle_state, remaining, rounds_left) -> int:
    """Learn every round until the required updates are done."""
    return int(remaining > 0)


class RandomSchedule:
    """Learn on exactly ``M`` rounds chosen uniformly among the ``N``."""

    def __init__(self, rounds: int, updates: int, rng):
        rng = np.random.default_rng(rng)
        self.learn = np.zeros(rounds, dtype=int)
        self.learn[rng.choice(rounds, size=updates, replace=False)] = 1
        self.rounds = rounds

    def __call__(self, oracle_state, remaining, rounds_left) -> int:
        return int(self.learn[self.rounds - rounds_left])


class DpPolicy:
    def __init__(self, policy_table: np.ndarray):
        self.table = policy_table

    def __call__(self, oracle_state, remaining, rounds_left) -> int:
        return int(self.table[rounds_left, oracle_state - 1, remaining])


def optimal_policy(config: FedConfig, g) -> DpPolicy:
    spec = FiniteMdpSpec(config.chain(np.clip(g, 0, 1)), config.rounds, config.updates_needed,
                         [[0.0] * len(g), list(config.privacy_cost)])
    return DpPolicy(solve_backward_dp(spec).policy)


# --- experiment --------------------------------------------------------------

@dataclass
class ExperimentResult:
    policy: str
    scenario: str
    oracle_states: np.ndarray
    actions: np.ndarray
    successes: np.ndarray
    learner_acc: np.ndarray
    eavesdropper_acc: np.ndarray
    finetuned_acc: np.ndarray | None
    chose_true: bool  # eavesdropper's final pick is the learner's trajectory
    calibrated_g: np.ndarray

    @property
    def final_learner(self) -> float:
        return float(self.learner_acc[-1])

    @property
    def final_eavesdropper(self) -> float:
        return float(self.eavesdropper_acc[-1])

    def write_csv(self, path, header_lines=()):
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["round", "oracle_state", "action", "success", "learner_acc", "eavesdropper_acc"])
            for i in range(len(self.actions)):
                w.writerow([i + 1, int(self.oracle_states[i]), int(self.actions[i]), int(self.successes[i]),
                            repr(float(self.learner_acc[i])), repr(float(self.eavesdropper_acc[i]))])


def _eavesdropper_pick(log: QueryLog, eaves: EavesdropperConfig, subset):
    """Returns (weights, chose_true)."""
    if eaves.scenario == "no-data":
        rep = eavesdropper_estimate(log, partition="tags")
        return rep.estimate, rep.chosen_tag == TRUE
    # with data: score the latest point of each trajectory on the subset, keep the lower loss
    best = None
    for tag in (TRUE, OBFUSCATING):
        recs = log.subsequence(tag)
        if not recs:
            continue
        loss = logistic_loss(recs[-1].query, *subset)
        if best is None or loss < best[0]:
            best = (loss, recs[-1].query, tag == TRUE)
    return best[1], best[2]


def run_experiment(config: FedConfig, eaves: EavesdropperConfig, policy: str, rng=None,
                   fed: Federation | None = None, g=None) -> ExperimentResult:
    """One federated run of ``config.rounds`` rounds under the named policy.

    ``policy`` is ``greedy``, ``random`` or ``optimal``; the optimal policy
    is the finite-horizon DP solution with ``g`` calibrated on this
    federation unless given.
    """
    rng = np.random.default_rng(config.seed if rng is None else rng)
    data_rng, cal_rng, sched_rng, run_rng, eaves_rng = rng.spawn(5)
    if fed is None:
        fed = generate_federation(config, data_rng)
    if g is None:
        g = calibrate_success(fed, rng=cal_rng)
    if policy == "greedy":
        pol = greedy_policy
    elif policy == "random":
        pol = RandomSchedule(config.rounds, config.updates_needed, sched_rng)
    elif policy == "optimal":
        pol = optimal_policy(config, g)
    else:
        raise ConfigError(f"unknown policy {policy!r}")

    n_sub = int(round(eaves.subset_fraction * fed.total))
    subset = sample_gaussian_classes(max(n_sub, 1), eaves.positive_fraction, fed.direction,
                                     config.separation, config.noise_std, eaves_rng)
    # the learner obfuscates with its own look-alike of an eavesdropper's skewed data
    mimic = sample_gaussian_classes(max(n_sub, 1), eaves.positive_fraction, fed.direction,
                                    config.separation, config.noise_std, eaves_rng)
    obf_mode = "subset-data" if eaves.scenario == "subset-data" else config.obfuscation

    Xv, yv = fed.val
    learner = np.zeros(config.dim + 1)
    obf = learner.copy()
    o, remaining = config.start_oracle, config.updates_needed
    log = QueryLog()
    states, acts, succ, lacc, eacc, facc = [], [], [], [], [], []
    last_update = None
    chose_true = False
    for n in range(config.rounds):
        u = int(pol(o, remaining, config.rounds - n))
        before = learner
        res = run_round(fed, o, u, learner, obf, run_rng, mimic, obf_mode, last_update)
        learner, obf = res.learner, res.obfuscator
        if res.success:
            remaining -= 1
            last_update = learner - before
        log.records.append(QueryRecord(n + 1, res.broadcast, u, TRUE if u == 1 else OBFUSCATING, res.success))
        est, chose_true = _eavesdropper_pick(log, eaves, subset)
        states.append(o)
        acts.append(u)
        succ.append(res.success)
        lacc.append(evaluate_accuracy(learner, Xv, yv))
        eacc.append(evaluate_accuracy(est, Xv, yv))
        if eaves.scenario == "subset-data":
            wf = est.copy()
            for _ in range(eaves.finetune_steps):
                wf = wf - config.lr * logistic_grad(wf, *subset)
            facc.append(evaluate_accuracy(wf, Xv, yv))
        o = step_oracle(config.chain(), o, run_rng)
    return ExperimentResult(policy, eaves.scenario, np.array(states), np.array(acts), np.array(succ),
                            np.array(lacc), np.array(eacc), np.array(facc) if facc else None,
                            chose_true, np.asarray(g))


@dataclass
class ComparisonRow:
    policy: str
    scenario: str
    learner_acc: float
    eavesdropper_acc: float
    finetuned_acc: float
    learning_rounds: float
    successes: float


def compare_policies(config: FedConfig, seeds, policies=("greedy", "random", "optimal"),
                     scenarios=SCENARIOS, eaves: EavesdropperConfig | None = None):
    """Paired-seed table of final accuracies; returns (rows, per-seed finals)."""
    eaves = EavesdropperConfig() if eaves is None else eaves
    finals = {}
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        streams = np.random.default_rng(cfg.seed).spawn(5)
        fed = generate_federation(cfg, streams[0])
        g = calibrate_success(fed, rng=streams[1])
        for sc in scenarios:
            ev = replace(eaves, scenario=sc)
            for pol in policies:
                r = run_experiment(cfg, ev, pol, np.random.default_rng(cfg.seed), fed=fed, g=g)
                finals.setdefault((pol, sc), []).append(
                    (r.final_learner, r.final_eavesdropper,
                     float(r.finetuned_acc[-1]) if r.finetuned_acc is not None else float("nan"),
                     int(r.actions.sum()), int(r.successes.sum())))
    rows = []
    for (pol, sc), vals in finals.items():
        a = np.array(vals, dtype=float)
        rows.append(ComparisonRow(pol, sc, *(float(v) for v in a.mean(axis=0))))
    return rows, {k: np.array(v, dtype=float) for k, v in finals.items()}


def write_comparison_csv(rows, path, header_lines=()):
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(["policy", "scenario", "learner_acc", "eavesdropper_acc", "finetuned_acc",
                    "learning_rounds", "successes"])
        for r in rows:
            w.writerow([r.policy, r.scenario, repr(r.learner_acc), repr(r.eavesdropper_acc),
                        repr(r.finetuned_acc), repr(r.learning_rounds), repr(r.successes)])
