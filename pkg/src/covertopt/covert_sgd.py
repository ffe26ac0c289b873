"""Covert SGD: a gated true trajectory, an obfuscating twin and the eavesdropper.

The learner keeps two iterates. Learning queries are posed at the true
iterate ``x`` and update it only when the oracle's reported noise passes
the gate. Obfuscating queries are posed at ``z``, which follows its own
update rule so that an observer sees two plausible SGD trajectories. The
eavesdropper splits the observed queries into two trajectories and bets on
the one with more queries (proportional sampling), guessing its last point.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .oracle import DomainError, GradientResponse, OracleChain, respond, step_oracle

TRUE, OBFUSCATING = "true", "obfuscating"
MODES = ("mirror", "random-walk", "subset-data")


class NoSuccessfulUpdatesError(RuntimeError):
    pass


@dataclass(frozen=True)
class Objective:
    gradient_fn: Callable
    L: float
    lo: np.ndarray
    hi: np.ndarray
    value_fn: Callable | None = None
    f_star: float = 0.0

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if self.L <= 0:
            raise ValueError("smoothness constant must be positive")
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("domain box is empty")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return x.shape == self.lo.shape and bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def project(self, x) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)

    def gradient(self, x) -> np.ndarray:
        return np.asarray(self.gradient_fn(np.asarray(x, dtype=float)), dtype=float)

    def value(self, x) -> float:
        if self.value_fn is None:
            raise NotImplementedError("objective has no value function")
        return float(self.value_fn(np.asarray(x, dtype=float)))


def quadratic(x_star, lo, hi, L: float = 1.0) -> Objective:
    """``f(x) = L/2 ||x - x_star||^2`` on a box."""
    xs = np.asarray(x_star, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), xs.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), xs.shape)
    return Objective(lambda x: L * (x - xs), L, lo, hi, lambda x: 0.5 * L * float((x - xs) @ (x - xs)), 0.0)


def required_updates(L: float, sigma: float, eps: float, c: float = 1.0) -> int:
    """Successful updates ``ceil(c * exp(L sigma^2 / (2 eps)))`` sufficient for ``E||grad f||^2 <= eps``."""
    if min(L, sigma, eps, c) <= 0:
        raise ValueError("L, sigma, eps and c must be positive")
    expo = L * sigma**2 / (2 * eps)
    if expo > 700:
        raise OverflowError(f"exponent {expo:.1f} is too large; use a larger eps")
    return max(1, math.ceil(c * math.exp(expo)))


# --- log ---------------------------------------------------------------------

@dataclass
class QueryRecord:
    k: int
    query: np.ndarray
    action: int
    tag: str
    success: bool = False


@dataclass
class QueryLog:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def queries(self) -> np.ndarray:
        return np.array([r.query for r in self.records])

    def tags(self) -> list:
        return [r.tag for r in self.records]

    def subsequence(self, tag: str) -> list:
        return [r for r in self.records if r.tag == tag]

    def write_csv(self, path, header_lines=()):
        d = len(self.records[0].query) if self.records else 0
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(["k", "action", "trajectory_tag", "success"] + [f"q{i}" for i in range(d)])
            for r in self.records:
                w.writerow([r.k, r.action, r.tag, int(r.success)] + [repr(float(v)) for v in r.query])


# --- learner -----------------------------------------------------------------

def harmonic_step(m: int) -> float:
    return 1.0 / m


@dataclass
class LearnerState:
    objective: Objective
    x: np.ndarray
    z: np.ndarray
    sigma_sq: float  # noise gate
    eps: float = 0.05
    step_rule: Callable = harmonic_step
    m: int = 0
    success_times: list = field(default_factory=list)
    history: list = field(default_factory=list)  # iterate before each successful update
    k: int = 0  # query clock
    log: QueryLog = field(default_factory=QueryLog)
    # obfuscation bookkeeping
    obf_steps: int = 0
    replay: list = field(default_factory=list)  # gradients of successful updates, oldest first
    replay_pos: int = 0

    def __post_init__(self):
        self.x = self.objective.project(np.asarray(self.x, dtype=float))
        self.z = self.objective.project(np.asarray(self.z, dtype=float))
        if self.sigma_sq <= 0 or self.eps <= 0:
            raise ValueError("sigma_sq and eps must be positive")


def pose_query(state: LearnerState, u: int) -> np.ndarray:
    """Query the true iterate when learning and the obfuscating one otherwise; logs the query."""
    if u not in (0, 1):
        raise ValueError("action must be 0 or 1")
    q = (state.x if u == 1 else state.z).copy()
    state.k += 1
    state.log.records.append(QueryRecord(state.k, q, u, TRUE if u == 1 else OBFUSCATING))
    return q


def learn_step(state: LearnerState, response: GradientResponse, u: int) -> bool:
    """Gated SGD step on the true iterate; returns whether it was a successful update."""
    r = np.asarray(response.gradient, dtype=float)
    if r.shape != state.x.shape:
        raise ValueError("response dimension does not match the iterate")
    if u != 1 or not response.sigma_sq <= state.sigma_sq:
        return False
    state.history.append(state.x.copy())
    state.m += 1
    state.success_times.append(state.k)
    state.replay.append(r.copy())
    state.x = state.objective.project(state.x - state.step_rule(state.m) * r)
    if state.log.records and state.log.records[-1].action == 1:
        state.log.records[-1].success = True
    return True


def reflect(objective: Objective, v) -> np.ndarray:
    return 2 * objective.midpoint - np.asarray(v, dtype=float)


def obfuscate_step(state: LearnerState, response: GradientResponse | None, u: int, mode: str = "mirror",
                   rng=None, sub_objective: Objective | None = None, walk_scale: float = 0.05,
                   sub_noise_std: float = 0.0) -> None:
    """Advance the obfuscating iterate on an obfuscating round.

    mirror: replay, oldest first, the gradients of the true trajectory's
        successful updates with reversed sign, so ``z`` traces the true
        path reflected through the domain midpoint. With nothing left to
        replay ``z`` stays put.
    random-walk: Gaussian step of scale ``walk_scale * step``.
    subset-data: SGD step on ``sub_objective`` with Gaussian noise.
    """
    if mode not in MODES:
        raise ValueError(f"unknown obfuscation mode {mode!r}")
    if u != 0:
        return
    obj = state.objective
    if mode == "mirror":
        if state.replay_pos < len(state.replay):
            g = state.replay[state.replay_pos]
            state.replay_pos += 1
            state.obf_steps += 1
            state.z = obj.project(state.z + state.step_rule(state.obf_steps) * g)
        return
    rng = np.random.default_rng(rng)
    state.obf_steps += 1
    mu = state.step_rule(state.obf_steps)
    if mode == "random-walk":
        state.z = obj.project(state.z + walk_scale * mu * rng.standard_normal(state.z.shape))
    else:
        if sub_objective is None:
            raise ValueError("subset-data mode needs a sub-objective")
        g = sub_objective.gradient(state.z)
        if sub_noise_std > 0:
            g = g + sub_noise_std * rng.standard_normal(g.shape)
        state.z = obj.project(state.z - mu * g)


def pick_final_estimate(state: LearnerState, rng) -> np.ndarray:
    """Sample a pre-update iterate with probability proportional to its step size."""
    if state.m == 0:
        raise NoSuccessfulUpdatesError("no successful updates recorded")
    rng = np.random.default_rng(rng)
    w = np.array([state.step_rule(i) for i in range(1, state.m + 1)], dtype=float)
    i = rng.choice(state.m, p=w / w.sum())
    return state.history[i].copy()


def final_estimate_probs(state: LearnerState) -> np.ndarray:
    w = np.array([state.step_rule(i) for i in range(1, state.m + 1)], dtype=float)
    return w / w.sum()


# --- eavesdropper ------------------------------------------------------------

@dataclass
class EavesdropperReport:
    posterior: float  # P_I for the first-started trajectory I
    chosen: int  # 0 = first-started trajectory, 1 = the other
    estimate: np.ndarray
    assignment: np.ndarray  # trajectory index per query
    chosen_tag: str | None = None  # ground-truth tag of the chosen trajectory
    mismatches: int = 0  # queries whose assigned trajectory disagrees with the tags
    ambiguous: int = 0  # assignments made with distance ratio above 0.5


def partition_nearest(queries: np.ndarray, jump: float | None = None):
    """Split an untagged query sequence into at most two trajectories.

    The first query starts trajectory 0. While only one trajectory exists a
    query farther than ``jump`` from its last point starts trajectory 1;
    afterwards every query joins the trajectory whose last point is
    nearest. Returns ``(assignment, ambiguous_count)``.
    """
    Q = np.asarray(queries, dtype=float)
    n = len(Q)
    assign = np.zeros(n, dtype=int)
    if n == 0:
        return assign, 0
    if jump is None:
        jump = 0.5 * (pdist(Q).max() if n > 1 else 0.0)
    last = [Q[0], None]
    ambiguous = 0
    for i in range(1, n):
        d0 = np.linalg.norm(Q[i] - last[0])
        if last[1] is None:
            if d0 > jump:
                assign[i] = 1
                last[1] = Q[i]
            else:
                last[0] = Q[i]
            continue
        d1 = np.linalg.norm(Q[i] - last[1])
        j = 0 if d0 <= d1 else 1
        near, far = min(d0, d1), max(d0, d1)
        if far > 0 and near / far > 0.5:
            ambiguous += 1
        assign[i] = j
        last[j] = Q[i]
    return assign, ambiguous


def eavesdropper_estimate(log, partition: str = "nearest", jump: float | None = None) -> EavesdropperReport:
    """Proportional-sampling estimate from the observed queries.

    ``log`` is a QueryLog (tags are used only for validation unless
    ``partition="tags"``) or a plain array of queries.
    """
    if isinstance(log, QueryLog):
        Q = log.queries()
        tags = log.tags()
    else:
        Q = np.asarray(log, dtype=float)
        tags = None
    if len(Q) == 0:
        raise ValueError("empty query log")
    if partition == "tags":
        if tags is None:
            raise ValueError("tag partition needs a QueryLog")
        first = tags[0]
        assign = np.array([0 if t == first else 1 for t in tags])
        ambiguous = 0
    elif partition == "nearest":
        assign, ambiguous = partition_nearest(Q, jump)
    else:
        raise ValueError(f"unknown partition {partition!r}")
    n0 = int((assign == 0).sum())
    n1 = len(assign) - n0
    chosen = 0 if n0 >= n1 else 1
    idx = np.flatnonzero(assign == chosen)
    rep = EavesdropperReport(n0 / (n0 + n1), chosen, Q[idx[-1]].copy(), assign, ambiguous=ambiguous)
    if tags is not None:
        members = [tags[i] for i in idx]
        rep.chosen_tag = max(set(members), key=members.count)
        first = tags[0]
        truth = np.array([0 if t == first else 1 for t in tags])
        rep.mismatches = int((truth != assign).sum())
    return rep


def step_length_stats(log: QueryLog) -> dict:
    """Mean and std of consecutive step lengths per trajectory tag."""
    out = {}
    for tag in (TRUE, OBFUSCATING):
        pts = np.array([r.query for r in log.subsequence(tag)])
        if len(pts) < 2:
            out[tag] = {"count": len(pts), "mean": float("nan"), "std": float("nan")}
            continue
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        out[tag] = {"count": len(pts), "mean": float(steps.mean()), "std": float(steps.std())}
    return out


# --- protocol ----------------------------------------------------------------

@dataclass
class ProtocolResult:
    state: LearnerState
    oracle_path: np.ndarray
    actions: np.ndarray
    successes: np.ndarray


def run_protocol(objective: Objective, chain: OracleChain, x0, sigma_sq: float, policy, rounds: int, rng,
                 z0=None, mode: str = "mirror", start_oracle: int = 1, stop_after: int | None = None,
                 sub_objective: Objective | None = None, eps: float = 0.05, step_rule=harmonic_step,
                 **obf_kwargs) -> ProtocolResult:
    """Run the coupled query/update loop.

    ``policy(oracle_state, successes_so_far, rounds_left)`` returns the
    action. Each round the oracle state decides whether the round is
    clean (probability ``g``); unclean rounds report infinite noise. The
    loop ends after ``rounds`` queries or once ``stop_after`` successful
    updates are done.
    """
    rng = np.random.default_rng(rng)
    z0 = reflect(objective, x0) if z0 is None else z0
    st = LearnerState(objective, x0, z0, sigma_sq, eps, step_rule)
    o = start_oracle
    path, acts, succ = [], [], []
    for n in range(rounds):
        if stop_after is not None and st.m >= stop_after:
            break
        u = int(policy(o, st.m, rounds - n))
        q = pose_query(st, u)
        clean = rng.random() < chain.success_prob[o - 1]
        resp = respond(objective, q, o, chain, rng, clean=clean)
        ok = learn_step(st, resp, u)
        obfuscate_step(st, resp, u, mode, rng, sub_objective=sub_objective, **obf_kwargs)
        path.append(o)
        acts.append(u)
        succ.append(ok)
        o = step_oracle(chain, o, rng)
    return ProtocolResult(st, np.array(path), np.array(acts), np.array(succ, dtype=bool))


def always_learn(oracle_state, successes, rounds_left) -> int:
    return 1
