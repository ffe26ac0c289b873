"""Markov-modulated stochastic gradient oracle.

Oracle states are 1-based in every public function (state 1 is the worst
noise regime, state W the best). Arrays are stored 0-based and JSON
serialization is 0-based as well, i.e. ``transition[i][j]`` is the
probability of moving from state ``i + 1`` to state ``j + 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ROW_TOL = 1e-9


class ValidationError(ValueError):
    """Malformed oracle or MDP input."""


class DomainError(ValueError):
    """Query outside the objective's domain box."""


def check_stochastic(matrix) -> np.ndarray:
    P = np.asarray(matrix, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
        raise ValidationError(f"transition must be a non-empty square matrix, got shape {P.shape}")
    if np.any(P < 0):
        raise ValidationError("transition has negative entries")
    sums = P.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_TOL)
    if bad.size:
        raise ValidationError(f"row {bad[0] + 1} sums to {sums[bad[0]]!r}, not 1")
    return P


@dataclass(frozen=True)
class OracleChain:
    transition: np.ndarray
    success_prob: np.ndarray
    noise_std: np.ndarray = field(default=None)

    def __post_init__(self):
        P = check_stochastic(self.transition)
        g = np.asarray(self.success_prob, dtype=float).reshape(-1)
        if g.shape[0] != P.shape[0]:
            raise ValidationError("success_prob length does not match number of states")
        if np.any(g < 0) or np.any(g > 1):
            raise ValidationError("success_prob entries must lie in [0, 1]")
        s = np.zeros_like(g) if self.noise_std is None else np.asarray(self.noise_std, dtype=float).reshape(-1)
        if s.shape != g.shape:
            raise ValidationError("noise_std length does not match number of states")
        if np.any(s < 0):
            raise ValidationError("noise_std entries must be nonnegative")
        for name, arr in (("transition", P), ("success_prob", g), ("noise_std", s)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_cumulative", np.cumsum(P, axis=1))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    def stationary(self) -> np.ndarray:
        """Stationary distribution of the oracle chain (least-squares solve)."""
        W = self.num_states
        A = np.vstack([self.transition.T - np.eye(W), np.ones(W)])
        b = np.zeros(W + 1)
        b[-1] = 1.0
        pi, *_ = np.linalg.lstsq(A, b, rcond=None)
        return pi

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "success_prob": self.success_prob.tolist(),
            "noise_std": self.noise_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OracleChain":
        try:
            return cls(d["transition"], d["success_prob"], d.get("noise_std"))
        except KeyError as exc:
            raise ValidationError(f"missing oracle field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "OracleChain":
        return cls.from_dict(json.loads(text))


def reference_chain(noise_std=None) -> OracleChain:
    """Three-state participation chain used in the federated experiments."""
    return OracleChain(
        [[0.8, 0.2, 0.0], [0.3, 0.5, 0.2], [0.0, 0.2, 0.8]],
        [0.1, 0.43, 0.95],
        noise_std,
    )


@dataclass
class FosdReport:
    passed: bool
    violation: tuple[int, int, int] | None = None
    tail_sums: np.ndarray | None = None


def validate_fosd(chain) -> FosdReport:
    """Check first-order stochastic dominance ordering of the rows.

    Passes iff for every pair of states i > j the tail mass of row i at
    every level l is at least the tail mass of row j. The first
    violating (i, j, l) triple (1-based) is reported.
    """
    P = chain.transition if isinstance(chain, OracleChain) else check_stochastic(chain)
    W = P.shape[0]
    tails = np.cumsum(P[:, ::-1], axis=1)[:, ::-1]
    for i in range(W):
        for j in range(i):
            for l in range(W):
                if tails[j, l] > tails[i, l] + ROW_TOL:
                    return FosdReport(False, (i + 1, j + 1, l + 1), tails)
    return FosdReport(True, None, tails)


def _check_state(chain: OracleChain, state: int) -> int:
    if not 1 <= state <= chain.num_states:
        raise IndexError(f"oracle state {state} outside 1..{chain.num_states}")
    return state - 1


def step_oracle(chain: OracleChain, state: int, rng: np.random.Generator) -> int:
    i = _check_state(chain, state)
    nxt = int(np.searchsorted(chain._cumulative[i], rng.random(), side="right"))
    return min(nxt, chain.num_states - 1) + 1


def success_draw(chain: OracleChain, state: int, action: int, rng: np.random.Generator) -> bool:
    i = _check_state(chain, state)
    if action == 0:
        return False
    return bool(rng.random() < chain.success_prob[i])


@dataclass(frozen=True)
class GradientResponse:
    gradient: np.ndarray
    sigma_sq: float


def respond(objective, query, state: int, chain: OracleChain, rng: np.random.Generator,
            clean: bool = True) -> GradientResponse:
    """Noisy gradient ``grad f(query) + eta`` with Gaussian eta.

    The reported statistic is ``||grad f(query)||^2 + d * noise_std^2``.
    A round that is not ``clean`` (the oracle could not gather enough
    signal this round) reports ``inf`` so it never passes a noise gate.
    """
    i = _check_state(chain, state)
    q = np.asarray(query, dtype=float)
    if not objective.contains(q):
        raise DomainError(f"query {q} outside domain")
    grad = np.asarray(objective.gradient(q), dtype=float)
    std = chain.noise_std[i]
    noise = std * rng.standard_normal(grad.shape) if std > 0 else np.zeros_like(grad)
    sigma_sq = float(grad @ grad + grad.size * std**2) if clean else float("inf")
    return GradientResponse(grad + noise, sigma_sq)


def sample_path(chain: OracleChain, start: int, length: int, rng: np.random.Generator) -> np.ndarray:
    path = np.empty(length, dtype=int)
    s = start
    for t in range(length):
        path[t] = s
        s = step_oracle(chain, s, rng)
    return path
