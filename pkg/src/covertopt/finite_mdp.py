"""Finite-horizon learn/obfuscate MDP solved by backward induction.

Epochs count queries *remaining*: ``V_0`` is the terminal cost and
``V_n`` is the optimal cost-to-go with ``n`` queries left. Arrays are
indexed ``[n, oracle - 1, remaining]``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .oracle import OracleChain, ValidationError, reference_chain

ENUM_GUARD = 20


class AssumptionWarning(UserWarning):
    pass


class InstanceTooLargeError(ValueError):
    pass


def is_integer_convex(l) -> bool:
    l = np.asarray(l, dtype=float)
    return bool(np.all(np.diff(l, 2) >= -1e-12)) if l.size > 2 else True


@dataclass(frozen=True)
class FiniteMdpSpec:
    chain: OracleChain
    horizon: int
    updates_needed: int
    privacy_cost: np.ndarray  # (2, W), row 0 must be zero
    terminal_cost: np.ndarray = None  # length M + 1, defaults to y**2

    def __post_init__(self):
        W = self.chain.num_states
        N, M = int(self.horizon), int(self.updates_needed)
        if N < 1 or M < 1:
            raise ValidationError("horizon and updates_needed must be positive")
        if M > N:
            raise ValidationError(f"updates_needed {M} exceeds horizon {N}")
        c = np.asarray(self.privacy_cost, dtype=float)
        if c.shape == (W,):
            c = np.vstack([np.zeros(W), c])
        if c.shape != (2, W):
            raise ValidationError(f"privacy_cost must have shape (2, {W})")
        if np.any(c[0] != 0):
            raise ValidationError("privacy cost of obfuscating must be zero")
        if np.any(c < 0):
            raise ValidationError("privacy cost must be nonnegative")
        l = (np.arange(M + 1, dtype=float) ** 2 if self.terminal_cost is None
             else np.asarray(self.terminal_cost, dtype=float).reshape(-1))
        if l.shape != (M + 1,):
            raise ValidationError(f"terminal_cost must have length {M + 1}")
        if l[0] != 0:
            raise ValidationError("terminal cost must vanish with no updates left")
        if np.any(np.diff(l) < 0):
            raise ValidationError("terminal cost must be nondecreasing")
        if not is_integer_convex(l):
            warnings.warn("terminal cost is not integer convex; structural results may fail",
                          AssumptionWarning, stacklevel=3)
        object.__setattr__(self, "horizon", N)
        object.__setattr__(self, "updates_needed", M)
        for name, arr in (("privacy_cost", c), ("terminal_cost", l)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def num_states(self) -> int:
        return self.chain.num_states * (self.updates_needed + 1)

    def to_dict(self) -> dict:
        return {
            "chain": self.chain.to_dict(),
            "horizon": self.horizon,
            "updates_needed": self.updates_needed,
            "privacy_cost": self.privacy_cost.tolist(),
            "terminal_cost": self.terminal_cost.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FiniteMdpSpec":
        d = dict(d)
        try:
            d["chain"] = OracleChain.from_dict(d["chain"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad finite MDP spec: {exc}") from None


def reference_finite_spec(privacy=(0.3, 0.8, 1.8), horizon=45, updates_needed=16, terminal_cost=None) -> FiniteMdpSpec:
    return FiniteMdpSpec(reference_chain(), horizon, updates_needed, [[0.0] * 3, list(privacy)], terminal_cost)


@dataclass(frozen=True)
class AugStateF:
    oracle: int
    remaining: int


def transition_kernel(spec: FiniteMdpSpec, y: AugStateF, u: int) -> dict:
    """Distribution of the next state as ``{AugStateF: probability}``."""
    W, M = spec.chain.num_states, spec.updates_needed
    if not 1 <= y.oracle <= W or not 0 <= y.remaining <= M:
        raise IndexError(f"state {y} out of range")
    if u not in (0, 1):
        raise ValueError("action must be 0 or 1")
    g = spec.chain.success_prob[y.oracle - 1] * u if y.remaining > 0 else 0.0
    out = {}
    for o2 in range(W):
        p = spec.chain.transition[y.oracle - 1, o2]
        if p == 0:
            continue
        if g > 0:
            key = AugStateF(o2 + 1, y.remaining - 1)
            out[key] = out.get(key, 0.0) + p * g
        if g < 1:
            key = AugStateF(o2 + 1, y.remaining)
            out[key] = out.get(key, 0.0) + p * (1 - g)
    return out


@dataclass
class DpSolution:
    spec: FiniteMdpSpec
    values: np.ndarray  # (N + 1, W, M + 1)
    policy: np.ndarray  # (N + 1, W, M + 1), row 0 unused
    Q: np.ndarray | None = None  # (N + 1, 2, W, M + 1), row 0 unused

    def value(self, n: int, y: AugStateF) -> float:
        return float(self.values[n, y.oracle - 1, y.remaining])

    def action(self, n: int, y: AugStateF) -> int:
        if not 1 <= n <= self.spec.horizon:
            raise IndexError("epoch out of range")
        return int(self.policy[n, y.oracle - 1, y.remaining])

    def write_csv(self, path, header_lines=()):
        N, W, R = self.values.shape
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(("epoch", "oracle_state", "learner_state", "value", "action"))
            for n in range(N):
                for o in range(W):
                    for r in range(R):
                        act = "" if n == 0 else int(self.policy[n, o, r])
                        w.writerow((n, o + 1, r, repr(float(self.values[n, o, r])), act))


def _expected_next(spec: FiniteMdpSpec, V: np.ndarray):
    """Expected next value under each action, shape (2, W, M + 1)."""
    PV = spec.chain.transition @ V
    g = spec.chain.success_prob[:, None]
    E1 = PV.copy()
    E1[:, 1:] = g * PV[:, :-1] + (1 - g) * PV[:, 1:]
    return PV, E1


def solve_backward_dp(spec: FiniteMdpSpec) -> DpSolution:
    N, W, M = spec.horizon, spec.chain.num_states, spec.updates_needed
    V = np.zeros((N + 1, W, M + 1))
    Q = np.zeros((N + 1, 2, W, M + 1))
    pol = np.zeros((N + 1, W, M + 1), dtype=np.int8)
    V[0] = spec.terminal_cost[None, :]
    c = spec.privacy_cost
    for n in range(1, N + 1):
        E0, E1 = _expected_next(spec, V[n - 1])
        Q[n, 0] = c[0][:, None] + E0
        Q[n, 1] = c[1][:, None] + E1
        learn = Q[n, 1] < Q[n, 0]  # ties go to obfuscation
        pol[n] = learn
        V[n] = np.where(learn, Q[n, 1], Q[n, 0])
    return DpSolution(spec, V, pol, Q)


def _dense_kernels(spec: FiniteMdpSpec):
    W, M = spec.chain.num_states, spec.updates_needed
    S = W * (M + 1)
    P = np.zeros((2, S, S))
    for o in range(1, W + 1):
        for r in range(M + 1):
            i = (o - 1) * (M + 1) + r
            for u in (0, 1):
                for y2, p in transition_kernel(spec, AugStateF(o, r), u).items():
                    P[u, i, (y2.oracle - 1) * (M + 1) + y2.remaining] += p
    return P


def evaluate_markov_policy(spec: FiniteMdpSpec, policy: np.ndarray) -> np.ndarray:
    """Exact cost-to-go of a deterministic Markov policy, shape (N + 1, W, M + 1)."""
    W, M, N = spec.chain.num_states, spec.updates_needed, spec.horizon
    P = _dense_kernels(spec)
    cost = np.repeat(spec.privacy_cost, M + 1, axis=1)  # (2, S)
    V = np.zeros((N + 1, W * (M + 1)))
    V[0] = np.tile(spec.terminal_cost, W)
    idx = np.arange(W * (M + 1))
    for n in range(1, N + 1):
        u = np.asarray(policy[n]).reshape(-1).astype(int)
        V[n] = cost[u, idx] + np.einsum("ij,j->i", P[u, idx], V[n - 1])
    return V.reshape(N + 1, W, M + 1)


def brute_force_optimal(spec: FiniteMdpSpec, guard: int = ENUM_GUARD) -> DpSolution:
    """Optimal values by enumerating every deterministic Markov policy.

    All ``2 ** (|S| * N)`` policies are evaluated exactly (vectorized over
    policies). The returned policy takes, at each (n, y), obfuscation if
    some policy obfuscating there attains ``V_n(y)`` and learning otherwise.
    """
    W, M, N = spec.chain.num_states, spec.updates_needed, spec.horizon
    S = W * (M + 1)
    if S * N > guard:
        raise InstanceTooLargeError(f"|S| * N = {S * N} exceeds enumeration guard {guard}")
    P = _dense_kernels(spec)
    cost = np.repeat(spec.privacy_cost, M + 1, axis=1)
    K = 2 ** (S * N)
    bits = ((np.arange(K)[:, None] >> np.arange(S * N)[None, :]) & 1).astype(np.int8)
    bits = bits.reshape(K, N, S)  # bits[k, n - 1, s]
    Vk = np.broadcast_to(np.tile(spec.terminal_cost, W), (K, S)).copy()
    values = np.zeros((N + 1, S))
    policy = np.zeros((N + 1, S), dtype=np.int8)
    values[0] = Vk[0]
    for n in range(1, N + 1):
        u = bits[:, n - 1, :]  # (K, S)
        EV = np.stack([Vk @ P[0].T, Vk @ P[1].T])  # (2, K, S)
        Vk = np.where(u == 1, cost[1][None, :] + EV[1], cost[0][None, :] + EV[0])
        values[n] = Vk.min(axis=0)
        best0 = np.where(u == 0, Vk, np.inf).min(axis=0)
        policy[n] = (best0 > values[n] + 1e-12).astype(np.int8)
    return DpSolution(spec, values.reshape(N + 1, W, M + 1), policy.reshape(N + 1, W, M + 1))


# --- structural checks --------------------------------------------------------

@dataclass
class StructureReport:
    passed: bool
    thresholds: np.ndarray | None = None  # (N + 1, W), row 0 unused
    violations: list = field(default_factory=list)

    def thresholds_json(self) -> str:
        if self.thresholds is None:
            return "{}"
        return json.dumps({str(o + 1): self.thresholds[1:, o].tolist()
                           for o in range(self.thresholds.shape[1])}, indent=2)


def verify_threshold_structure(solution) -> StructureReport:
    """Check each epoch/oracle slice of the policy is a 0 -> 1 step in the learner state.

    The threshold is the smallest learner state that learns (``M + 1`` if
    none). Violations are listed as ``(n, oracle, remaining)`` of each
    obfuscating state sitting above a learning one.
    """
    pol = solution.policy if hasattr(solution, "policy") else np.asarray(solution)
    N1, W, R = pol.shape
    thr = np.full((N1, W), R, dtype=int)
    bad = []
    for n in range(1, N1):
        for o in range(W):
            col = pol[n, o] > 0
            if col.any():
                first = int(np.argmax(col))
                thr[n, o] = first
                for r in np.flatnonzero(~col[first:]) + first:
                    bad.append((n, o + 1, int(r)))
    return StructureReport(not bad, thr, bad)


def verify_value_monotonicity(solution: DpSolution, check_oracle: bool | None = None, tol: float = 1e-10) -> StructureReport:
    """Monotonicity of V: in queries left, in the learner state and (optionally) in the oracle state.

    The oracle-state check is asserted only when requested or when the
    learn cost is nonincreasing in the oracle state and the success
    probabilities are nondecreasing; otherwise it is skipped.
    """
    V = solution.values
    spec = solution.spec
    bad = []
    d = V[1:] - V[:-1]
    for n, o, r in zip(*np.nonzero(d > tol)):
        bad.append(("queries_left", int(n) + 1, int(o) + 1, int(r)))
    d = V[:, :, :-1] - V[:, :, 1:]
    for n, o, r in zip(*np.nonzero(d > tol)):
        bad.append(("learner_state", int(n), int(o) + 1, int(r) + 1))
    if check_oracle is None:
        check_oracle = (bool(np.all(np.diff(spec.privacy_cost[1]) <= 0))
                        and bool(np.all(np.diff(spec.chain.success_prob) >= 0)))
    if check_oracle:
        d = V[:, 1:, :] - V[:, :-1, :]
        for n, o, r in zip(*np.nonzero(d > tol)):
            bad.append(("oracle_state", int(n), int(o) + 2, int(r)))
    return StructureReport(not bad, None, bad)


def verify_submodularity(solution: DpSolution, tol: float = 1e-10) -> StructureReport:
    """``Q_n(y, 1) - Q_n(y, 0)`` must be nonincreasing in the learner state for y^L >= 1."""
    if solution.Q is None:
        raise ValueError("solution does not carry Q tables")
    D = solution.Q[1:, 1] - solution.Q[1:, 0]  # (N, W, M + 1)
    inc = D[:, :, 2:] - D[:, :, 1:-1]
    bad = [(int(n) + 1, int(o) + 1, int(r) + 2) for n, o, r in zip(*np.nonzero(inc > tol))]
    return StructureReport(not bad, None, bad)


def threshold_in_epochs(solution: DpSolution) -> dict:
    """Report whether each oracle state's threshold is monotone in queries left.

    Informational only: returns ``{oracle: "nonincreasing" | "nondecreasing" | "neither"}``.
    """
    thr = verify_threshold_structure(solution).thresholds[1:]
    out = {}
    for o in range(thr.shape[1]):
        d = np.diff(thr[:, o])
        if np.all(d <= 0):
            out[o + 1] = "nonincreasing"
        elif np.all(d >= 0):
            out[o + 1] = "nondecreasing"
        else:
            out[o + 1] = "neither"
    return out


def simulate_policy(spec: FiniteMdpSpec, policy: np.ndarray, rng, start_oracle: int = 1, runs: int = 1):
    """Sample paths of a Markov policy; returns (costs, final remaining) per run."""
    rng = np.random.default_rng(rng)
    W, M, N = spec.chain.num_states, spec.updates_needed, spec.horizon
    cum = np.cumsum(spec.chain.transition, axis=1)
    cum[:, -1] = 1.0 + 1e-12
    o = np.full(runs, start_oracle - 1)
    r = np.full(runs, M)
    cost = np.zeros(runs)
    for n in range(N, 0, -1):
        u = policy[n, o, r]
        cost += spec.privacy_cost[1, o] * u
        succ = (u == 1) & (r > 0) & (rng.random(runs) < spec.chain.success_prob[o])
        r = r - succ
        o = (rng.random(runs)[:, None] >= cum[o]).sum(axis=1)
    cost += spec.terminal_cost[r]
    return cost, r


def random_instance(rng, W=None, M=None, N=None, enforce_assumptions=True) -> FiniteMdpSpec:
    """Random spec; with ``enforce_assumptions`` the chain is FOSD ordered,
    learn costs are nonincreasing and success probabilities nondecreasing in
    the oracle state, and the terminal cost is increasing and integer convex."""
    rng = np.random.default_rng(rng)
    W = W or int(rng.integers(1, 4))
    M = M or int(rng.integers(1, 5))
    N = N or int(rng.integers(M, M + 6))
    if enforce_assumptions:
        # nondecreasing tail sums across rows give an FOSD-ordered chain
        raw = rng.random((W, W - 1)) if W > 1 else np.zeros((1, 0))
        tails = np.sort(np.sort(raw, axis=1)[:, ::-1], axis=0)
        full = np.hstack([np.ones((W, 1)), tails, np.zeros((W, 1))])
        P = full[:, :-1] - full[:, 1:]
        g = np.sort(rng.uniform(0.05, 1.0, W))
        c1 = np.sort(rng.uniform(0.0, 2.0, W))[::-1]
        inc = np.sort(rng.uniform(0.1, 3.0, M))
        l = np.concatenate([[0.0], np.cumsum(inc)])
    else:
        P = rng.dirichlet(np.ones(W), size=W)
        g = rng.uniform(0, 1, W)
        c1 = rng.uniform(0, 2, W)
        l = np.concatenate([[0.0], np.cumsum(rng.uniform(0, 3, M))])
    P = P / P.sum(axis=1, keepdims=True)
    return FiniteMdpSpec(OracleChain(P, g), N, M, [np.zeros(W), c1], l)
