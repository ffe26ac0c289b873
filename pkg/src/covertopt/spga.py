"""Structured policy gradient for the queue CMDP.

The randomized two-threshold rule is smoothed into a mixture of two
sigmoids per (oracle, arrival) slice and tuned by simultaneous
perturbation: one Bernoulli mask picks the parameters to perturb, the
masked parameters are shifted by +/- omega, and the cost difference of
the two rollouts gives the gradient estimate. A primal-dual update
handles the learning-cost constraint.

Parameters are stored as an array ``(..., 3, W, 2)`` holding
``[theta1, theta2, h]`` for every oracle state and arrival slot.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .cmdp import AugStateC, CmdpSpec, RandThresholdPolicy, rollout


@dataclass
class SigmoidPolicyParams:
    theta1: np.ndarray  # (W, 2)
    theta2: np.ndarray
    h: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        self.theta1 = np.array(self.theta1, dtype=float)
        self.theta2 = np.array(self.theta2, dtype=float)
        self.h = np.array(self.h, dtype=float)
        if not (self.theta1.shape == self.theta2.shape == self.h.shape) or self.theta1.ndim != 2:
            raise ValueError("theta1, theta2 and h must share a (W, 2) shape")
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if np.any(self.h < 0) or np.any(self.h > 1):
            raise ValueError("h must lie in [0, 1]")

    @classmethod
    def constant(cls, W: int, theta1: float = 10.0, theta2: float = 10.0, h: float = 0.5, tau: float = 0.5):
        return cls(np.full((W, 2), theta1), np.full((W, 2), theta2), np.full((W, 2), h), tau)

    def stack(self) -> np.ndarray:
        return np.stack([self.theta1, self.theta2, self.h])

    @classmethod
    def from_stack(cls, arr, tau: float) -> "SigmoidPolicyParams":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[0], arr[1], np.clip(arr[2], 0.0, 1.0), tau)

    def learn_table(self, spec: CmdpSpec) -> np.ndarray:
        return sigmoid_tables(self.stack(), self.tau, spec.queue_cap)


def sigmoid_tables(theta: np.ndarray, tau: float, queue_cap: int) -> np.ndarray:
    """Learn probabilities for every queue length.

    ``theta`` has shape ``(..., 3, W, 2)``; the result has shape
    ``(..., W, queue_cap + 1, 2)`` and is zero at an empty queue.
    """
    theta = np.asarray(theta, dtype=float)
    q = np.arange(queue_cap + 1, dtype=float)[:, None]
    t1 = theta[..., 0, :, None, :]
    t2 = theta[..., 1, :, None, :]
    h = np.clip(theta[..., 2, :, None, :], 0.0, 1.0)
    prob = h * expit((q - t1) / tau) + (1 - h) * expit((q - t2) / tau)
    prob[..., 0, :] = 0.0
    return prob


def policy_prob(params: SigmoidPolicyParams, y: AugStateC) -> float:
    if y.queue == 0:
        return 0.0
    o, a = y.oracle - 1, int(y.arrival > 0)
    h = params.h[o, a]
    s1 = expit((y.queue - params.theta1[o, a]) / params.tau)
    s2 = expit((y.queue - params.theta2[o, a]) / params.tau)
    return float(h * s1 + (1 - h) * s2)


def extract_thresholds(params: SigmoidPolicyParams) -> RandThresholdPolicy:
    """Round to the nearest nonnegative integers; ``p = h`` on the band.

    If ``theta1 > theta2`` the roles swap and ``p = 1 - h``. A threshold
    of 1 is reported as 0 since an empty queue never learns, so both
    describe the same policy (this matches the solver's convention).
    """
    t1, t2, h = params.theta1, params.theta2, params.h
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    p = np.where(t1 <= t2, h, 1 - h)
    phi1 = np.maximum(np.floor(lo + 0.5), 0).astype(int)
    phi2 = np.maximum(np.floor(hi + 0.5), 0).astype(int)
    phi1[phi1 == 1] = 0
    phi2[phi2 == 1] = 0
    return RandThresholdPolicy(phi1, phi2, p)


# --- configuration ----------------------------------------------------------

@dataclass
class SpgaConfig:
    iterations: int = 2000
    runs: int = 100
    rollout_length: int = 100
    omega: float = 3.0  # perturbation of the thresholds
    omega_h: float = 0.1  # perturbation of the mixing weights
    theta_gain: float = 300.0  # multiplies the threshold gradient estimates
    kappa0: float = 0.5
    constant_step: bool = False  # True: kappa = kappa0 every iteration
    rho: float = 20.0
    xi0: float = 10.0
    literal_xi_floor: bool = False  # floor the multiplier at (1 - kappa / rho) * xi instead of 0
    tau: float = 0.5
    theta0: float = 10.0
    h0: float = 0.5
    initial_queue: int = 40
    initial_oracle: int = 3
    initial_arrival: int = 0
    theta_margin: float = 2.0  # thresholds are projected onto [-margin, queue_cap + margin]
    seed: int = 0
    switches: list = field(default_factory=list)  # [(iteration, CmdpSpec)], applied before that iteration

    def __post_init__(self):
        for name in ("omega", "omega_h", "theta_gain", "kappa0", "rho", "tau"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.xi0 < 0:
            raise ValueError("xi0 must be nonnegative")
        if self.iterations < 0 or self.runs < 1 or self.rollout_length < 1:
            raise ValueError("iterations >= 0, runs >= 1 and rollout_length >= 1 required")

    def step(self, n: int) -> float:
        return self.kappa0 if self.constant_step else self.kappa0 / n

    def omegas(self, W: int) -> np.ndarray:
        om = np.empty((3, W, 2))
        om[:2] = self.omega
        om[2] = self.omega_h
        return om


def estimate_avg_cost(selector: str, params: SigmoidPolicyParams, spec: CmdpSpec, T: int, rng,
                      initial=(1, 0, 0)) -> float:
    """Empirical average of one cost over a ``T``-step rollout of the smoothed policy.

    ``selector`` is ``"privacy"`` (the minimized cost, which includes the
    overflow penalty unless it is booked as learning cost) or ``"learning"``.
    """
    if selector not in ("privacy", "learning"):
        raise ValueError("selector must be 'privacy' or 'learning'")
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(rng)
    o, q, arr = initial
    state = (np.array([o - 1]), np.array([q]), np.array([int(arr > 0)]))
    out = rollout(spec, params.learn_table(spec)[None], state, rng.random((T, 1, 4)))
    key = "objective" if selector == "privacy" else "learning"
    return float(out[key][0] / T)


# --- iteration ----------------------------------------------------------------

@dataclass
class StepInfo:
    privacy: np.ndarray  # (R,) mean of the +/- estimates
    learning: np.ndarray
    gamma: np.ndarray  # (R, 3, W, 2)


def primal_dual_update(theta, xi, gamma, c_pm, l_pm, kappa, config: SpgaConfig, constraint: float,
                       queue_cap: float = np.inf):
    """Projected primal-dual SPSA update from the +/- cost estimates.

    ``theta`` is ``(R, 3, W, 2)``; ``c_pm`` and ``l_pm`` are pairs of
    length-R arrays (costs at ``theta + delta`` and ``theta - delta``).
    """
    W = theta.shape[-2]
    c_plus, c_minus = (np.asarray(v, dtype=float) for v in c_pm)
    l_plus, l_minus = (np.asarray(v, dtype=float) for v in l_pm)
    dc = (c_plus - c_minus)[:, None, None, None]
    dl = (l_plus - l_minus)[:, None, None, None]
    gain = np.ones((3, W, 2))
    gain[:2] = config.theta_gain
    scale = np.where(gamma > 0, gain / (2.0 * config.omegas(W)), 0.0)
    l_hat = 0.5 * (l_plus + l_minus)
    mult = np.maximum(0.0, xi + config.rho * (l_hat - constraint))[:, None, None, None]
    new = theta - kappa * scale * (dc + dl * mult)
    new[:, :2] = np.clip(new[:, :2], -config.theta_margin, queue_cap + config.theta_margin)
    new[:, 2] = np.clip(new[:, 2], 0.0, 1.0)
    floor = (1.0 - kappa / config.rho) * xi if config.literal_xi_floor else 0.0
    xi_new = np.maximum(floor, xi + kappa * (l_hat - constraint))
    return new, xi_new


def spsa_minimize(cost_fn, theta0, config: SpgaConfig, rng, learning_fn=None, constraint: float = 0.0):
    """Run the same primal-dual update on deterministic surrogate costs.

    ``cost_fn`` (and optionally ``learning_fn``) map a ``(3, W, 2)``
    parameter array to a float. Returns the final parameters and the
    multiplier.
    """
    rng = np.random.default_rng(rng)
    theta = np.asarray(theta0, dtype=float)[None].copy()
    xi = np.array([float(config.xi0)])
    lf = learning_fn or (lambda th: 0.0)
    om = config.omegas(theta.shape[-2])
    for n in range(1, config.iterations + 1):
        gamma = (rng.random(theta.shape) < 0.5).astype(float)
        plus, minus = theta[0] + gamma[0] * om, theta[0] - gamma[0] * om
        theta, xi = primal_dual_update(theta, xi, gamma, ([cost_fn(plus)], [cost_fn(minus)]),
                                       ([lf(plus)], [lf(minus)]), config.step(n), config, constraint)
    return theta[0], float(xi[0])


def _batch_step(theta, xi, kappa, config: SpgaConfig, spec: CmdpSpec, draws, state, gamma=None):
    """One primal-dual SPSA step for ``R`` independent runs.

    ``theta`` is ``(R, 3, W, 2)``, ``xi`` is ``(R,)`` and ``state`` a
    tuple of length-R arrays. Both rollouts of a run share their random
    numbers and start from the run's current system state; the system
    then continues from the end of the ``+`` rollout.
    """
    R = theta.shape[0]
    W = spec.chain.num_states
    T = config.rollout_length
    if gamma is None:
        gamma = (draws.per_run((3, W, 2)) < 0.5).astype(float)
    delta = gamma * config.omegas(W)
    both = np.concatenate([theta + delta, theta - delta])
    tables = sigmoid_tables(both, config.tau, spec.queue_cap)
    U = draws.uniforms(T, 4)
    st2 = tuple(np.concatenate([s, s]) for s in state)
    out = rollout(spec, tables, st2, np.concatenate([U, U], axis=1))
    c = out["objective"] / T
    l = out["learning"] / T
    new, xi_new = primal_dual_update(theta, xi, gamma, (c[:R], c[R:]), (l[:R], l[R:]), kappa, config,
                                     spec.constraint, spec.queue_cap)
    c_hat = 0.5 * (c[:R] + c[R:])
    l_hat = 0.5 * (l[:R] + l[R:])
    nxt = tuple(s[:R] for s in out["state"])
    return new, xi_new, nxt, StepInfo(c_hat, l_hat, gamma)


def spga_iterate(params: SigmoidPolicyParams, xi: float, n: int, config: SpgaConfig, spec: CmdpSpec,
                 rng, state=None, gamma=None):
    """Single-run iteration ``n`` (1-based, sets the step size).

    Returns ``(params, xi, state, info)`` where ``state`` is the system
    state ``(oracle, queue, arrival)`` after the rollouts.
    """
    rng = np.random.default_rng(rng)
    if state is None:
        state = (config.initial_oracle, config.initial_queue, config.initial_arrival)
    o, q, a = state
    st = (np.array([o - 1]), np.array([q]), np.array([int(a > 0)]))
    g = None if gamma is None else np.asarray(gamma, dtype=float)[None]
    theta, xi_new, nxt, info = _batch_step(params.stack()[None], np.array([xi]), config.step(n),
                                           config, spec, _Draws([rng]), st, g)
    new_state = (int(nxt[0][0]) + 1, int(nxt[1][0]), int(nxt[2][0]) * spec.arrival_batch)
    return SigmoidPolicyParams.from_stack(theta[0], params.tau), float(xi_new[0]), new_state, info


@dataclass
class SpgaResult:
    final: np.ndarray  # (R, 3, W, 2)
    xi: np.ndarray  # (R,)
    mean_trace: np.ndarray  # (K + 1, 3, W, 2), mean over runs
    xi_trace: np.ndarray  # (K + 1,)
    privacy_trace: np.ndarray  # (K,)
    learning_trace: np.ndarray  # (K,)
    tau: float

    def mean_params(self) -> SigmoidPolicyParams:
        return SigmoidPolicyParams.from_stack(self.final.mean(axis=0), self.tau)

    def run_params(self, i: int) -> SigmoidPolicyParams:
        return SigmoidPolicyParams.from_stack(self.final[i], self.tau)

    def write_trace_csv(self, path, header_lines=(), arrival_batch: int = 1):
        K1, _, W, _ = self.mean_trace.shape
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh)
            w.writerow(("iteration", "oracle_state", "arrival_state", "theta1", "theta2", "h", "xi",
                        "privacy_est", "learning_est"))
            for k in range(K1):
                pe = repr(float(self.privacy_trace[k - 1])) if k else ""
                le = repr(float(self.learning_trace[k - 1])) if k else ""
                for o in range(W):
                    for a in range(2):
                        t = self.mean_trace[k, :, o, a]
                        w.writerow((k, o + 1, a * arrival_batch, repr(float(t[0])), repr(float(t[1])),
                                    repr(float(t[2])), repr(float(self.xi_trace[k])), pe, le))


def run_spga(config: SpgaConfig, spec: CmdpSpec, initial: SigmoidPolicyParams | None = None) -> SpgaResult:
    """``config.runs`` independent SPGA runs, vectorized; run ``i`` is seeded by ``seed + i``.

    Randomness is drawn per run from its own generator so results do not
    depend on how many runs are batched together.
    """
    W = spec.chain.num_states
    R, K = config.runs, config.iterations
    init = initial or SigmoidPolicyParams.constant(W, config.theta0, config.theta0, config.h0, config.tau)
    if init.theta1.shape != (W, 2):
        raise ValueError("initial parameters do not match the oracle")
    theta = np.broadcast_to(init.stack(), (R, 3, W, 2)).copy()
    xi = np.full(R, float(config.xi0))
    state = (np.full(R, config.initial_oracle - 1), np.full(R, config.initial_queue),
             np.full(R, int(config.initial_arrival > 0)))
    gens = [np.random.default_rng(config.seed + i) for i in range(R)]
    switches = dict(config.switches)
    mean_trace = np.empty((K + 1, 3, W, 2))
    xi_trace = np.empty(K + 1)
    c_trace = np.empty(K)
    l_trace = np.empty(K)
    mean_trace[0] = theta.mean(axis=0)
    xi_trace[0] = xi.mean()
    cur = spec
    draws = _Draws(gens)
    for n in range(1, K + 1):
        if n in switches:
            cur = switches[n]
            if cur.chain.num_states != W:
                raise ValueError("a switch may not change the number of oracle states")
            state = (state[0], np.minimum(state[1], cur.queue_cap), state[2])
        theta, xi, state, info = _batch_step(theta, xi, config.step(n), config, cur, draws, state)
        mean_trace[n] = theta.mean(axis=0)
        xi_trace[n] = xi.mean()
        c_trace[n - 1] = info.privacy.mean()
        l_trace[n - 1] = info.learning.mean()
    return SpgaResult(theta, xi, mean_trace, xi_trace, c_trace, l_trace, config.tau)


class _Draws:
    """Random numbers with the run axis filled from one generator per run."""

    def __init__(self, gens):
        self.gens = gens

    def per_run(self, shape) -> np.ndarray:
        return np.stack([g.random(shape) for g in self.gens])

    def uniforms(self, T: int, k: int) -> np.ndarray:
        return np.stack([g.random((T, k)) for g in self.gens], axis=1)
