"""Dense two-phase tableau simplex.

Small and dependency-free on purpose: it backs the occupation-measure
oracle that cross-checks the Lagrangian CMDP solver, so it must not share
code with that solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class LpError(RuntimeError):
    pass


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    iterations: int


_PIV_TOL = 1e-9
_OPT_TOL = 1e-10


def _pivot(T: np.ndarray, r: int, j: int) -> None:
    T[r] /= T[r, j]
    col = T[:, j].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])


def _entering(red: np.ndarray, allowed: np.ndarray, bland: bool) -> int:
    cand = np.flatnonzero((red < -_OPT_TOL) & allowed)
    if cand.size == 0:
        return -1
    if bland:
        return int(cand[0])
    return int(cand[np.argmin(red[cand])])


def _leaving(T: np.ndarray, j: int, basis: np.ndarray) -> int:
    col = T[:-1, j]
    rows = np.flatnonzero(col > _PIV_TOL)
    if rows.size == 0:
        return -1
    ratios = T[rows, -1] / col[rows]
    best = ratios.min()
    ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
    # smallest basic variable index among ties keeps Bland's rule finite
    return int(ties[np.argmin(basis[ties])])


def _run(T, basis, allowed, max_iter):
    it = 0
    degenerate_run = 0
    bland = False
    while True:
        # once stalling is detected stay on Bland's rule, which cannot cycle
        bland = bland or degenerate_run > 50
        j = _entering(T[-1, :-1], allowed, bland)
        if j < 0:
            return it
        r = _leaving(T, j, basis)
        if r < 0:
            raise LpError("LP is unbounded")
        degenerate_run = degenerate_run + 1 if T[r, -1] <= _PIV_TOL else 0
        _pivot(T, r, j)
        basis[r] = j
        it += 1
        if it > max_iter:
            raise LpError(f"simplex exceeded {max_iter} pivots")


def linprog_dense(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, max_iter=200_000) -> LpResult:
    """Minimize ``c @ x`` s.t. ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``x >= 0``."""
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float).reshape(-1)
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float).reshape(-1)
    m_eq, m_ub = A_eq.shape[0], A_ub.shape[0]
    m = m_eq + m_ub
    if m == 0:
        if np.any(c < 0):
            raise LpError("LP is unbounded")
        return LpResult(np.zeros(n), 0.0, 0)

    # columns: original | slacks | artificials | rhs
    A = np.zeros((m, n + m_ub))
    A[:m_eq, :n] = A_eq
    A[m_eq:, :n] = A_ub
    A[m_eq:, n:] = np.eye(m_ub)
    b = np.concatenate([b_eq, b_ub])
    neg = b < 0
    A[neg] *= -1
    b[neg] *= -1
    n_tot = n + m_ub

    T = np.zeros((m + 1, n_tot + m + 1))
    T[:m, :n_tot] = A
    T[:m, n_tot:n_tot + m] = np.eye(m)
    T[:m, -1] = b
    basis = np.arange(n_tot, n_tot + m)

    # phase 1: minimize the sum of artificials
    T[-1, :n_tot] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    allowed = np.ones(n_tot + m, dtype=bool)
    it1 = _run(T, basis, allowed, max_iter)
    if -T[-1, -1] > 1e-7 * max(1.0, np.abs(b).max()):
        raise LpError(f"LP is infeasible (phase-1 residual {-T[-1, -1]:.3e})")

    # drive zero-level artificials out of the basis; drop redundant rows
    keep = np.ones(m + 1, dtype=bool)
    for r in range(m):
        if basis[r] >= n_tot:
            row = T[r, :n_tot]
            cand = np.flatnonzero(np.abs(row) > _PIV_TOL)
            if cand.size:
                j = int(cand[np.argmax(np.abs(row[cand]))])
                _pivot(T, r, j)
                basis[r] = j
            else:
                keep[r] = False
    T = np.vstack([T[:m][keep[:m]], T[-1:]])
    basis = basis[keep[:m]]
    m2 = T.shape[0] - 1

    # phase 2
    cost = np.concatenate([c, np.zeros(m_ub)])
    T[-1, :] = 0.0
    T[-1, :n_tot] = cost
    for r in range(m2):
        jb = basis[r]
        if jb < n_tot and cost[jb] != 0.0:
            T[-1] -= cost[jb] * T[r]
    allowed = np.zeros(n_tot + m, dtype=bool)
    allowed[:n_tot] = True
    it2 = _run(T, basis, allowed, max_iter)

    # polish: resolve the final basis directly against the original data
    x_full = np.zeros(n_tot)
    structural = basis < n_tot
    Bcols = basis[structural]
    rows = np.flatnonzero(keep[:m])
    A_rows = A[rows]
    try:
        sol, *_ = np.linalg.lstsq(A_rows[:, Bcols], b[rows], rcond=None)
        x_full[Bcols] = np.maximum(sol, 0.0)
    except np.linalg.LinAlgError:
        for r in range(m2):
            if basis[r] < n_tot:
                x_full[basis[r]] = T[r, -1]
    x = x_full[:n]
    return LpResult(x, float(c @ x), it1 + it2)
