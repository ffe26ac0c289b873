import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from covertopt.simplex import LpError, linprog_dense


def test_textbook_problem():
    # max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18
    res = linprog_dense([-3, -5], A_ub=[[1, 0], [0, 2], [3, 2]], b_ub=[4, 12, 18])
    np.testing.assert_allclose(res.x, [2, 6], atol=1e-9)
    assert res.objective == pytest.approx(-36)


def test_equality_and_negative_rhs():
    # x + y = 1, -x <= -0.25
    res = linprog_dense([1, 2], A_eq=[[1, 1]], b_eq=[1], A_ub=[[-1, 0]], b_ub=[-0.25])
    np.testing.assert_allclose(res.x, [1, 0], atol=1e-9)


def test_redundant_equalities():
    res = linprog_dense([1, 1, 0], A_eq=[[1, 1, 1], [2, 2, 2]], b_eq=[1, 2])
    assert res.objective == pytest.approx(0)


def test_infeasible_and_unbounded():
    with pytest.raises(LpError):
        linprog_dense([1, 1], A_eq=[[1, 1]], b_eq=[-1])
    with pytest.raises(LpError):
        linprog_dense([-1, 0], A_ub=[[0, 1]], b_ub=[1])


@given(st.integers(0, 10_000), st.integers(2, 7), st.integers(0, 3), st.integers(1, 4))
def test_matches_highs_on_random_programs(seed, n, m_eq, m_ub):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(0, 1, n)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ x0
    A_ub = np.vstack([rng.uniform(-1, 1, (m_ub, n)), np.ones((1, n))])
    b_ub = A_ub @ x0 + rng.uniform(0, 1, m_ub + 1)
    c = rng.normal(size=n)
    ref = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq if m_eq else None, b_eq=b_eq if m_eq else None,
                  method="highs")
    assert ref.status == 0
    res = linprog_dense(c, A_eq if m_eq else None, b_eq if m_eq else None, A_ub, b_ub)
    assert res.objective == pytest.approx(ref.fun, abs=1e-7)
    assert np.all(res.x >= -1e-12)
    assert np.all(A_ub @ res.x <= b_ub + 1e-7)
    if m_eq:
        np.testing.assert_allclose(A_eq @ res.x, b_eq, atol=1e-7)
