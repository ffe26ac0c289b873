"""Infinite-horizon constrained MDP with an optimization queue.

State ``(oracle, queue, arrival)``: oracle state in 1..W, queue length in
0..queue_cap and the pending arrival batch (0 or ``arrival_batch``). One
step: pick an action, pay the costs, then the queue becomes
``max(queue - success, 0) + arrival`` truncated at the cap, the oracle
moves by its chain and a fresh arrival is drawn. Learning on an empty
queue has no effect.

Internally a state is the flat index ``((o - 1) * (cap + 1) + q) * 2 + a``
with ``a = 1`` iff an arrival is pending. Policies are learn-probability
tables of shape ``(W, cap + 1, 2)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import linalg as splinalg

from .oracle import OracleChain, ValidationError, reference_chain
from .simplex import linprog_dense


class SolverError(RuntimeError):
    pass


class InfeasibleError(SolverError):
    pass


class BracketError(SolverError):
    pass


@dataclass(frozen=True)
class CmdpSpec:
    chain: OracleChain
    privacy_cost: np.ndarray
    learning_cost: np.ndarray
    constraint: float
    arrival_prob: float
    arrival_batch: int
    queue_cap: int
    overflow_cost: float = 0.0
    overflow_in_learning: bool = False

    def __post_init__(self):
        W = self.chain.num_states
        c = np.asarray(self.privacy_cost, dtype=float)
        l = np.asarray(self.learning_cost, dtype=float)
        if c.shape != (2, W) or l.shape != (2, W):
            raise ValidationError(f"cost tables must have shape (2, {W})")
        if np.any(c[0] != 0):
            raise ValidationError("privacy cost of obfuscating must be zero")
        if np.any(c < 0) or np.any(l < 0):
            raise ValidationError("costs must be nonnegative")
        if self.constraint < 0:
            raise ValidationError("constraint must be nonnegative")
        if not 0 <= self.arrival_prob <= 1:
            raise ValidationError("arrival_prob must lie in [0, 1]")
        if self.arrival_batch < 1 or self.queue_cap < self.arrival_batch:
            raise ValidationError("need 1 <= arrival_batch <= queue_cap")
        if self.overflow_cost < 0:
            raise ValidationError("overflow_cost must be nonnegative")
        for name, arr in (("privacy_cost", c), ("learning_cost", l)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_states(self) -> int:
        return self.chain.num_states * (self.queue_cap + 1) * 2

    @property
    def table_shape(self) -> tuple[int, int, int]:
        return (self.chain.num_states, self.queue_cap + 1, 2)

    def with_(self, **changes) -> "CmdpSpec":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return CmdpSpec(**d)

    def to_dict(self) -> dict:
        return {
            "chain": self.chain.to_dict(),
            "privacy_cost": self.privacy_cost.tolist(),
            "learning_cost": self.learning_cost.tolist(),
            "constraint": self.constraint,
            "arrival_prob": self.arrival_prob,
            "arrival_batch": self.arrival_batch,
            "queue_cap": self.queue_cap,
            "overflow_cost": self.overflow_cost,
            "overflow_in_learning": self.overflow_in_learning,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CmdpSpec":
        d = dict(d)
        try:
            d["chain"] = OracleChain.from_dict(d["chain"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad CMDP spec: {exc}") from None


def reference_cmdp(**overrides) -> CmdpSpec:
    """Queue experiment: learn cost 0.6 when obfuscating with work pending."""
    spec = dict(
        chain=reference_chain(),
        privacy_cost=[[0.0, 0.0, 0.0], [0.3, 0.8, 1.8]],
        learning_cost=[[0.6, 0.6, 0.6], [0.0, 0.0, 0.0]],
        constraint=0.2,
        arrival_prob=0.1,
        arrival_batch=4,
        queue_cap=40,
        overflow_cost=100.0,
    )
    spec.update(overrides)
    return CmdpSpec(**spec)


def tracking_specs(**overrides) -> tuple[CmdpSpec, CmdpSpec]:
    """Light-load regime (3% arrivals of 10 updates) and the 10%-of-4 regime it switches to.

    The second row of the transition matrix as printed sums to 1.1; rows
    are renormalized.
    """
    P = np.array([[0.7, 0.2, 0.1], [0.3, 0.1, 0.7], [0.2, 0.2, 0.7]])
    chain = OracleChain(P / P.sum(axis=1, keepdims=True), [0.1, 0.6, 0.9])
    before = reference_cmdp(chain=chain, arrival_prob=0.03, arrival_batch=10, **overrides)
    after = reference_cmdp(chain=chain, arrival_prob=0.1, arrival_batch=4, **overrides)
    return before, after


@dataclass(frozen=True)
class AugStateC:
    oracle: int
    queue: int
    arrival: int


def state_index(spec: CmdpSpec, y: AugStateC) -> int:
    if not 1 <= y.oracle <= spec.chain.num_states or not 0 <= y.queue <= spec.queue_cap:
        raise IndexError(f"state {y} out of range")
    if y.arrival not in (0, spec.arrival_batch):
        raise IndexError(f"arrival {y.arrival} must be 0 or {spec.arrival_batch}")
    a = int(y.arrival > 0)
    return ((y.oracle - 1) * (spec.queue_cap + 1) + y.queue) * 2 + a


def lagrangian_cost(spec: CmdpSpec, u: int, y: AugStateC, lam: float) -> float:
    """Instantaneous ``c + lam * l`` plus the full-queue penalty.

    The penalty is charged on the objective side (not scaled by ``lam``)
    whenever the queue is full and an arrival is about to be dropped.
    """
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    l = spec.learning_cost[u, y.oracle - 1] if y.queue > 0 else 0.0
    c = spec.privacy_cost[u, y.oracle - 1]
    pen = spec.overflow_cost * expected_drops(spec, u, y)
    if spec.overflow_in_learning:
        return c + lam * (l + pen)
    return c + pen + lam * l


def expected_drops(spec: CmdpSpec, u: int, y: AugStateC) -> float:
    """Expected number of arriving updates that do not fit in the queue this step."""
    excess = y.queue + y.arrival - spec.queue_cap
    if excess <= 0:
        return 0.0
    s = spec.chain.success_prob[y.oracle - 1] if u and y.queue > 0 else 0.0
    return excess - s


@dataclass
class Model:
    """Sparse transition matrices and cost vectors over the flat state space."""

    P: tuple  # per action, CSR (S, S)
    privacy: np.ndarray  # (2, S) c only
    drop: np.ndarray  # (2, S) expected number of dropped updates
    objective: np.ndarray  # (2, S) minimized cost, c plus the penalty unless it is a learning cost
    learning: np.ndarray  # (2, S) constrained cost


def build_model(spec: CmdpSpec) -> Model:
    W, Q = spec.chain.num_states, spec.queue_cap + 1
    S = spec.num_states
    o, q, a = np.meshgrid(np.arange(W), np.arange(Q), np.arange(2), indexing="ij")
    o, q, a = o.ravel(), q.ravel(), a.ravel()
    src = np.arange(S)
    arrival = a * spec.arrival_batch
    g = spec.chain.success_prob[o]
    PO = spec.chain.transition
    delta = spec.arrival_prob

    mats = []
    for u in (0, 1):
        s = g * u * (q > 0)
        rows, cols, vals = [], [], []
        for succ, w in ((1, s), (0, 1.0 - s)):
            q_next = np.minimum(np.maximum(q - succ, 0) + arrival, spec.queue_cap)
            for o2 in range(W):
                for a2, pa in ((0, 1.0 - delta), (1, delta)):
                    p = w * PO[o, o2] * pa
                    nz = p > 0
                    rows.append(src[nz])
                    cols.append(((o2 * Q + q_next[nz]) * 2 + a2))
                    vals.append(p[nz])
        M = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, S)
        )
        mats.append(M)

    privacy = np.stack([spec.privacy_cost[u, o] for u in (0, 1)])
    learning = np.stack([np.where(q > 0, spec.learning_cost[u, o], 0.0) for u in (0, 1)])
    excess = q + arrival - spec.queue_cap
    drop = np.stack([np.where(excess > 0, excess - g * u * (q > 0), 0.0) for u in (0, 1)])
    penalty = spec.overflow_cost * drop
    if spec.overflow_in_learning:
        return Model(tuple(mats), privacy, drop, privacy, learning + penalty)
    return Model(tuple(mats), privacy, drop, privacy + penalty, learning)


def transition_row(spec: CmdpSpec, y: AugStateC, u: int, model: Model | None = None) -> dict:
    """Next-state distribution as ``{AugStateC: probability}``."""
    model = model or build_model(spec)
    row = model.P[u].getrow(state_index(spec, y))
    out = {}
    Q = spec.queue_cap + 1
    for j, p in zip(row.indices, row.data):
        o, rest = divmod(j, Q * 2)
        qq, a = divmod(rest, 2)
        out[AugStateC(o + 1, qq, a * spec.arrival_batch)] = out.get(AugStateC(o + 1, qq, a * spec.arrival_batch), 0.0) + p
    return out


# --- policy evaluation ------------------------------------------------------

@dataclass
class PolicyEvaluation:
    stationary: np.ndarray
    privacy_cost: float
    learning_cost: float
    overflow_rate: float  # long-run dropped updates per step
    objective: float  # long-run average of the minimized cost

    def lagrangian(self, lam: float) -> float:
        return self.objective + lam * self.learning_cost


def as_table(policy, spec: CmdpSpec) -> np.ndarray:
    if hasattr(policy, "learn_table"):
        table = policy.learn_table(spec)
    else:
        table = np.asarray(policy, dtype=float)
    if table.shape != spec.table_shape:
        raise ValueError(f"policy table has shape {table.shape}, expected {spec.table_shape}")
    return table


def evaluate_policy(spec: CmdpSpec, policy, model: Model | None = None) -> PolicyEvaluation:
    """Exact long-run averages from the stationary distribution.

    Requires the induced chain to have a single recurrent class.
    """
    model = model or build_model(spec)
    pi_u = as_table(policy, spec).reshape(-1)
    P = model.P[0].multiply((1 - pi_u)[:, None]) + model.P[1].multiply(pi_u[:, None])
    P = sparse.csr_matrix(P)
    S = P.shape[0]
    A = (P.T - sparse.identity(S, format="csr")).tolil()
    A[S - 1, :] = np.ones(S)
    b = np.zeros(S)
    b[-1] = 1.0
    with np.errstate(all="ignore"):
        stat = splinalg.spsolve(A.tocsc(), b)
    resid = np.abs(P.T @ stat - stat).max() if np.all(np.isfinite(stat)) else np.inf
    if not np.isfinite(resid) or resid > 1e-8 or stat.min() < -1e-9:
        raise SolverError("policy does not induce a single recurrent class")
    stat = np.maximum(stat, 0.0)
    stat /= stat.sum()
    c = (1 - pi_u) * model.privacy[0] + pi_u * model.privacy[1]
    l = (1 - pi_u) * model.learning[0] + pi_u * model.learning[1]
    d = (1 - pi_u) * model.drop[0] + pi_u * model.drop[1]
    obj = (1 - pi_u) * model.objective[0] + pi_u * model.objective[1]
    return PolicyEvaluation(stat, float(stat @ c), float(stat @ l), float(stat @ d), float(stat @ obj))


# --- threshold structure ----------------------------------------------------

def slice_threshold(actions: np.ndarray) -> int | None:
    """Threshold of a deterministic 0/1 action column over queue lengths.

    The action at queue 0 is ignored (learning there is a no-op). Returns
    the smallest queue length from which the policy always learns, with 0
    meaning it learns whenever work is pending and ``len(actions)``
    meaning it never learns. ``None`` if the column is not monotone.
    """
    col = np.asarray(actions)[1:] > 0.5
    if np.any(col[:-1] & ~col[1:]):
        return None
    if col.all():
        return 0
    if not col.any():
        return len(actions)
    return int(np.argmax(col)) + 1


def threshold_report(spec: CmdpSpec, table: np.ndarray) -> dict:
    out = {}
    for o in range(spec.chain.num_states):
        for a in range(2):
            out[(o + 1, a * spec.arrival_batch)] = slice_threshold(table[o, :, a])
    return out


@dataclass
class RandThresholdPolicy:
    """Two-threshold randomized rule per (oracle, arrival) slice.

    Below ``phi1`` obfuscate, in ``[phi1, phi2)`` learn with probability
    ``p``, at or above ``phi2`` learn. An empty queue always obfuscates.
    """

    phi1: np.ndarray  # (W, 2) int
    phi2: np.ndarray
    p: np.ndarray  # (W, 2) float

    def __post_init__(self):
        self.phi1 = np.asarray(self.phi1, dtype=int)
        self.phi2 = np.asarray(self.phi2, dtype=int)
        self.p = np.asarray(self.p, dtype=float)
        if np.any(self.phi1 > self.phi2):
            raise ValueError("phi1 must not exceed phi2")
        if np.any(self.p < 0) or np.any(self.p > 1):
            raise ValueError("p must lie in [0, 1]")

    def learn_prob(self, oracle: int, queue: int, arrival_slot: int) -> float:
        if queue == 0:
            return 0.0
        i = oracle - 1
        if queue < self.phi1[i, arrival_slot]:
            return 0.0
        if queue < self.phi2[i, arrival_slot]:
            return float(self.p[i, arrival_slot])
        return 1.0

    def learn_table(self, spec: CmdpSpec) -> np.ndarray:
        W, Q, _ = spec.table_shape
        q = np.arange(Q)[None, :, None]
        phi1 = self.phi1[:, None, :]
        phi2 = self.phi2[:, None, :]
        table = np.where(q < phi1, 0.0, np.where(q < phi2, self.p[:, None, :], 1.0))
        table = np.broadcast_to(table, (W, Q, 2)).copy()
        table[:, 0, :] = 0.0
        return table

    def to_dict(self, spec: CmdpSpec) -> dict:
        out = {}
        for o in range(self.phi1.shape[0]):
            for a in range(2):
                out[f"{o + 1},{a * spec.arrival_batch}"] = {
                    "phi1": int(self.phi1[o, a]),
                    "phi2": int(self.phi2[o, a]),
                    "p": float(self.p[o, a]),
                }
        return out

    @classmethod
    def deterministic(cls, thresholds: np.ndarray) -> "RandThresholdPolicy":
        t = np.asarray(thresholds, dtype=int)
        return cls(t, t, np.ones(t.shape))


def table_to_rand_threshold(spec: CmdpSpec, table: np.ndarray, tol: float = 1e-9) -> RandThresholdPolicy:
    """Read a learn-probability table back as thresholds; raises if it has another shape."""
    W, Q, _ = spec.table_shape
    phi1 = np.zeros((W, 2), dtype=int)
    phi2 = np.zeros((W, 2), dtype=int)
    p = np.ones((W, 2))
    for o in range(W):
        for a in range(2):
            col = table[o, 1:, a]
            if np.any(np.diff(col) < -tol):
                raise SolverError(f"slice ({o + 1}, {a}) is not monotone in the queue")
            full = np.flatnonzero(col >= 1 - tol)
            hi = int(full[0]) + 1 if full.size else Q
            if full.size and not np.all(col[full[0]:] >= 1 - tol):
                raise SolverError(f"slice ({o + 1}, {a}) is not a threshold rule")
            some = np.flatnonzero(col > tol)
            lo = int(some[0]) + 1 if some.size else hi
            band = col[lo - 1:hi - 1]
            if band.size and np.ptp(band) > 1e-7:
                raise SolverError(f"slice ({o + 1}, {a}) has more than one randomization level")
            if lo == 1 and hi == 1:
                lo = hi = 0
            elif lo == 1:
                lo = 0
            phi1[o, a], phi2[o, a] = lo, hi
            p[o, a] = float(band[0]) if band.size else 1.0
    return RandThresholdPolicy(phi1, phi2, p)


# --- Lagrangian average-cost solver ------------------------------------------

@dataclass
class LagrangianSolution:
    lam: float
    table: np.ndarray  # deterministic 0/1 learn table
    gain: float
    bias: np.ndarray
    iterations: int
    thresholds: dict
    evaluation: PolicyEvaluation | None = None

    @property
    def is_threshold(self) -> bool:
        return all(v is not None for v in self.thresholds.values())


def solve_avg_lagrangian(spec: CmdpSpec, lam: float, model: Model | None = None, tol: float = 1e-9,
                         max_iter: int = 1_000_000, h0: np.ndarray | None = None,
                         evaluate: bool = True) -> LagrangianSolution:
    """Relative value iteration for the average Lagrangian cost ``c + lam * l``.

    Uses the aperiodicity transform ``h <- (h + T h) / 2`` and stops once
    ``span(T h - h) < tol``. Ties go to obfuscation.
    """
    if lam < 0:
        raise ValueError("multiplier must be nonnegative")
    model = model or build_model(spec)
    w0 = model.objective[0] + lam * model.learning[0]
    w1 = model.objective[1] + lam * model.learning[1]
    P0, P1 = model.P
    h = np.zeros(spec.num_states) if h0 is None else np.array(h0, dtype=float)
    ref = 0
    span = np.inf
    for it in range(1, max_iter + 1):
        q0 = w0 + P0 @ h
        q1 = w1 + P1 @ h
        Th = np.minimum(q0, q1)
        diff = Th - h
        lo, hi = diff.min(), diff.max()
        span = hi - lo
        if span < tol * max(1.0, abs(hi)):
            break
        h = 0.5 * (h + Th)
        h -= h[ref]
    else:
        raise SolverError(f"relative value iteration did not converge: span {span:.3e}")
    table = (q1 < q0).astype(float).reshape(spec.table_shape)
    sol = LagrangianSolution(lam, table, 0.5 * (lo + hi), h, it, threshold_report(spec, table))
    if evaluate:
        sol.evaluation = evaluate_policy(spec, table, model)
    return sol


def solve_discounted_lagrangian(spec: CmdpSpec, lam: float, beta: float, model: Model | None = None,
                                tol: float = 1e-10, max_iter: int = 1_000_000):
    """Value iteration for the discounted Lagrangian cost; returns (table, values)."""
    if not 0 < beta < 1:
        raise ValueError("discount must lie in (0, 1)")
    model = model or build_model(spec)
    w0 = model.objective[0] + lam * model.learning[0]
    w1 = model.objective[1] + lam * model.learning[1]
    V = np.zeros(spec.num_states)
    for _ in range(max_iter):
        q0 = w0 + beta * (model.P[0] @ V)
        q1 = w1 + beta * (model.P[1] @ V)
        V_new = np.minimum(q0, q1)
        if np.abs(V_new - V).max() < tol * (1 - beta):
            V = V_new
            break
        V = V_new
    else:
        raise SolverError("discounted value iteration did not converge")
    return (q1 < q0).astype(float).reshape(spec.table_shape), V.reshape(spec.table_shape)


def always_learn_table(spec: CmdpSpec) -> np.ndarray:
    t = np.ones(spec.table_shape)
    t[:, 0, :] = 0.0
    return t


def never_learn_table(spec: CmdpSpec) -> np.ndarray:
    return np.zeros(spec.table_shape)


# --- constrained solver -------------------------------------------------------

@dataclass
class CmdpSolution:
    policy: RandThresholdPolicy | None  # None when the mixed table has no threshold form
    table: np.ndarray
    lam1: float
    lam2: float
    mix: float  # learn probability inside the band, i.e. the weight on lam2's policy
    low: LagrangianSolution  # lam1 policy (learns less)
    high: LagrangianSolution  # lam2 policy (learns more)
    evaluation: PolicyEvaluation

    @property
    def privacy_cost(self) -> float:
        return self.evaluation.privacy_cost

    @property
    def learning_cost(self) -> float:
        return self.evaluation.learning_cost

    def report(self, spec: CmdpSpec) -> dict:
        return {
            "lambda1": self.lam1,
            "lambda2": self.lam2,
            "band_learn_prob": self.mix,
            "privacy_cost": self.privacy_cost,
            "learning_cost": self.learning_cost,
            "overflow_rate": self.evaluation.overflow_rate,
            "objective": self.evaluation.objective,
            "policy": None if self.policy is None else self.policy.to_dict(spec),
            "table": None if self.policy is not None else self.table.tolist(),
            "thresholds_low": {f"{k[0]},{k[1]}": v for k, v in self.low.thresholds.items()},
            "thresholds_high": {f"{k[0]},{k[1]}": v for k, v in self.high.thresholds.items()},
        }


def _mixed(sol_lo: LagrangianSolution, sol_hi: LagrangianSolution, q: float) -> np.ndarray:
    return (1 - q) * sol_lo.table + q * sol_hi.table


def solve_cmdp(spec: CmdpSpec, lam_tol: float = 1e-8, model: Model | None = None) -> CmdpSolution:
    """Lagrangian bisection plus state-wise randomization between the bracket policies."""
    model = model or build_model(spec)
    Lam = spec.constraint
    feas = evaluate_policy(spec, always_learn_table(spec), model)
    if feas.learning_cost > Lam + 1e-9:
        raise InfeasibleError(
            f"always-learn has average learning cost {feas.learning_cost:.6g} > constraint {Lam:g}"
        )

    def finish(lo, hi, q):
        table = _mixed(lo, hi, q)
        ev = evaluate_policy(spec, table, model)
        try:
            policy = table_to_rand_threshold(spec, table)
        except SolverError:
            policy = None
        return CmdpSolution(policy, table, lo.lam, hi.lam, q, lo, hi, ev)

    sol0 = solve_avg_lagrangian(spec, 0.0, model)
    if sol0.evaluation.learning_cost <= Lam:
        return finish(sol0, sol0, 1.0)

    max_c = spec.privacy_cost.max()
    max_l = spec.learning_cost.max()
    if max_l <= 0:
        return finish(sol0, sol0, 1.0)
    lam_max = 1e4 * max(max_c + spec.overflow_cost, 1e-12) / max_l
    hi = solve_avg_lagrangian(spec, lam_max, model)
    if hi.evaluation.learning_cost > Lam:
        raise BracketError(f"no multiplier in [0, {lam_max:g}] meets the constraint")
    lo = sol0
    while hi.lam - lo.lam > lam_tol:
        mid = 0.5 * (lo.lam + hi.lam)
        sol = solve_avg_lagrangian(spec, mid, model, h0=hi.bias)
        if sol.evaluation.learning_cost > Lam:
            lo = sol
        else:
            hi = sol

    L_lo, L_hi = lo.evaluation.learning_cost, hi.evaluation.learning_cost
    if np.array_equal(lo.table, hi.table) or abs(L_hi - Lam) <= 1e-12:
        return finish(hi, hi, 1.0)

    def excess(q):
        return evaluate_policy(spec, _mixed(lo, hi, q), model).learning_cost - Lam

    q = optimize.brentq(excess, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=200)
    return finish(lo, hi, q)


# --- LP oracle ---------------------------------------------------------------

@dataclass
class LpSolution:
    objective: float
    occupation: np.ndarray  # (S, 2)
    table: np.ndarray  # learn probabilities, 0 where the state is never visited
    iterations: int


def lp_occupation_oracle(spec: CmdpSpec, max_pairs: int = 5000) -> LpSolution:
    """Average-cost CMDP as an occupation-measure LP, solved by the dense simplex."""
    S = spec.num_states
    if 2 * S > max_pairs:
        raise SolverError(f"{2 * S} state-action pairs exceed the LP oracle limit {max_pairs}")
    model = build_model(spec)
    P0, P1 = (m.toarray() for m in model.P)
    # x ordered as [x(., 0), x(., 1)]
    balance = np.hstack([np.eye(S) - P0.T, np.eye(S) - P1.T])[:-1]
    A_eq = np.vstack([balance, np.ones(2 * S)])
    b_eq = np.zeros(A_eq.shape[0])
    b_eq[-1] = 1.0
    A_ub = np.concatenate([model.learning[0], model.learning[1]])[None, :]
    c = np.concatenate([model.objective[0], model.objective[1]])
    res = linprog_dense(c, A_eq, b_eq, A_ub, [spec.constraint])
    x = res.x.reshape(2, S).T
    mass = x.sum(axis=1)
    table = np.where(mass > 1e-12, x[:, 1] / np.where(mass > 0, mass, 1.0), 0.0)
    return LpSolution(res.objective, x, table.reshape(spec.table_shape), res.iterations)


# --- queue stability ---------------------------------------------------------

@dataclass
class StabilityReport:
    stable_guaranteed: bool
    lhs: float
    rhs: float
    note: str = "sufficient condition only: failing it does not imply instability"


def check_queue_stability(spec: CmdpSpec) -> StabilityReport:
    """Drift test ``delta * M / g_min < 1 - Lambda / l(0, W)``."""
    l0W = spec.learning_cost[0, -1]
    if l0W <= 0:
        raise ValueError("obfuscation cost in the best oracle state must be positive")
    rhs = 1.0 - spec.constraint / l0W
    g_min = spec.chain.success_prob.min()
    if g_min <= 0:
        return StabilityReport(False, math.inf, rhs,
                               "smallest success probability is 0; condition cannot hold")
    lhs = spec.arrival_prob * spec.arrival_batch / g_min
    return StabilityReport(bool(lhs < rhs), lhs, rhs)


# --- simulation --------------------------------------------------------------

@dataclass
class SimulationResult:
    privacy: np.ndarray  # per-run average privacy cost
    objective: np.ndarray  # per-run average minimized cost (privacy plus overflow penalty by default)
    learning: np.ndarray  # per-run average learning cost
    learn_fraction: np.ndarray
    overflows: np.ndarray  # per-run count of dropped updates
    max_queue: np.ndarray
    final_state: tuple  # (oracle, queue, arrival slot) arrays, 1-based oracle
    trace: dict | None = None

    @property
    def mean_privacy(self) -> float:
        return float(self.privacy.mean())

    @property
    def mean_learning(self) -> float:
        return float(self.learning.mean())

    def summary(self) -> dict:
        n = len(self.privacy)
        se = (lambda v: float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0)
        return {
            "runs": n,
            "privacy_mean": self.mean_privacy,
            "privacy_se": se(self.privacy),
            "objective_mean": float(self.objective.mean()),
            "learning_mean": self.mean_learning,
            "learning_se": se(self.learning),
            "learn_fraction_mean": float(self.learn_fraction.mean()),
            "overflows_total": int(self.overflows.sum()),
            "max_queue": int(self.max_queue.max()),
        }


def rollout(spec: CmdpSpec, tables: np.ndarray, state, uniforms: np.ndarray, record: bool = False):
    """Vectorized simulation core.

    ``tables`` has shape ``(R, W, Q, 2)`` or ``(W, Q, 2)``; ``state`` is a
    tuple of length-R integer arrays (oracle 0-based, queue, arrival slot);
    ``uniforms`` has shape ``(T, R, 4)``. Returns per-run cost sums and the
    final state.
    """
    W, Q, _ = spec.table_shape
    o, q, a = (np.array(s, dtype=np.int64) for s in state)
    R = o.shape[0]
    flat = np.broadcast_to(tables, (R, W, Q, 2)).reshape(R, -1)
    rix = np.arange(R)
    cum = np.cumsum(spec.chain.transition, axis=1)
    cum[:, -1] = 1.0 + 1e-12
    g = spec.chain.success_prob
    c1 = spec.privacy_cost[1]
    lc = spec.learning_cost
    cap, batch, delta = spec.queue_cap, spec.arrival_batch, spec.arrival_prob
    pen_l = spec.overflow_cost if spec.overflow_in_learning else 0.0
    pen_c = 0.0 if spec.overflow_in_learning else spec.overflow_cost
    priv = np.zeros(R)
    obj = np.zeros(R)
    lrn = np.zeros(R)
    nlearn = np.zeros(R)
    over = np.zeros(R, dtype=np.int64)
    qmax = q.copy()
    T = uniforms.shape[0]
    if record:
        rec = {k: np.zeros((T, R), dtype=float) for k in
               ("oracle_state", "queue", "arrival", "action", "dropped", "privacy_cost", "learning_cost")}
    for t in range(T):
        U = uniforms[t]
        prob = flat[rix, (o * Q + q) * 2 + a]
        u = U[:, 0] < prob
        busy = q > 0
        succ = u & busy & (U[:, 1] < g[o])
        raw = np.maximum(q - succ, 0) + a * batch
        drops = np.maximum(raw - cap, 0)
        pc = np.where(u, c1[o], 0.0)
        lcost = np.where(busy, lc[u.astype(np.int64), o], 0.0) + pen_l * drops
        if record:
            rec["oracle_state"][t] = o + 1
            rec["queue"][t] = q
            rec["arrival"][t] = a * batch
            rec["action"][t] = u
            rec["dropped"][t] = drops
            rec["privacy_cost"][t] = pc
            rec["learning_cost"][t] = lcost
        priv += pc
        obj += pc + pen_c * drops
        lrn += lcost
        nlearn += u
        over += drops
        q = np.minimum(raw, cap)
        qmax = np.maximum(qmax, q)
        o = (U[:, 2:3] >= cum[o]).sum(axis=1)
        a = (U[:, 3] < delta).astype(np.int64)
    out = dict(privacy=priv, objective=obj, learning=lrn, learns=nlearn, overflows=over,
               max_queue=qmax, state=(o, q, a))
    if record:
        out["trace"] = rec
    return out


def _initial(spec, initial, R):
    o, q, arr = initial if initial is not None else (1, 0, 0)
    return (np.full(R, o - 1), np.full(R, q), np.full(R, int(arr > 0)))


def simulate_cmdp(spec: CmdpSpec, policy, T: int, rng, initial=None, runs: int = 1,
                  record: bool = False, chunk: int = 20_000) -> SimulationResult:
    """Monte-Carlo run(s) of the queue dynamics under a stationary policy.

    ``rng`` is a seed, a Generator, or a list of either (one per run). With
    ``runs > 1`` and a single seed, run ``i`` uses seed ``seed + i``.
    """
    if T < 1:
        raise ValueError("horizon must be at least 1")
    if isinstance(rng, (list, tuple)):
        gens = [np.random.default_rng(r) if not isinstance(r, np.random.Generator) else r for r in rng]
    elif isinstance(rng, np.random.Generator):
        gens = [rng] if runs == 1 else [np.random.default_rng(rng.integers(2**63)) for _ in range(runs)]
    else:
        gens = [np.random.default_rng(int(rng) + i) for i in range(runs)]
    R = len(gens)
    table = as_table(policy, spec)
    state = _initial(spec, initial, R)
    tot = dict(privacy=np.zeros(R), objective=np.zeros(R), learning=np.zeros(R), learns=np.zeros(R),
               overflows=np.zeros(R, dtype=np.int64), max_queue=state[1].copy())
    traces = []
    done = 0
    while done < T:
        n = min(chunk, T - done)
        U = np.stack([g.random((n, 4)) for g in gens], axis=1)
        out = rollout(spec, table, state, U, record=record)
        for k in ("privacy", "objective", "learning", "learns", "overflows"):
            tot[k] += out[k]
        tot["max_queue"] = np.maximum(tot["max_queue"], out["max_queue"])
        state = out["state"]
        if record:
            traces.append(out["trace"])
        done += n
    trace = None
    if record:
        trace = {k: np.concatenate([tr[k] for tr in traces]) for k in traces[0]}
    return SimulationResult(tot["privacy"] / T, tot["objective"] / T, tot["learning"] / T, tot["learns"] / T,
                            tot["overflows"], tot["max_queue"], (state[0] + 1, state[1], state[2]), trace)


def write_trace_csv(path, trace: dict, run: int = 0, header_lines=()):
    cols = ("oracle_state", "queue", "arrival", "action", "dropped", "privacy_cost", "learning_cost")
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(("t",) + cols)
        T = trace["queue"].shape[0]
        for t in range(T):
            row = [t]
            for c in cols:
                v = trace[c][t, run]
                row.append(int(v) if c in ("oracle_state", "queue", "arrival", "action", "dropped") else repr(float(v)))
            w.writerow(row)


def policy_json(spec: CmdpSpec, policy: RandThresholdPolicy) -> str:
    return json.dumps(policy.to_dict(spec), indent=2, sort_keys=True)
