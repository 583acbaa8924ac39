import math

import numpy as np
import pytest

from opfverify.errors import InconsistentDimensions
from opfverify.lp import EQ, GE, LE, LpProblem, dump_lp, solve_lp

from oracles import lp_vertex_enumeration


def lp(c, A, senses, b, lo, hi, sense="min"):
    A = np.array(A, float)
    if A.size == 0:
        A = A.reshape(0, len(c))
    return LpProblem(np.array(c, float), A,
                     tuple(senses), np.array(b, float), np.array(lo, float), np.array(hi, float), sense)


def test_single_bound_active():
    sol = solve_lp(lp([1], [[1]], [LE], [1], [0], [math.inf], "max"))
    assert sol.status == "optimal"
    assert sol.primal[0] == pytest.approx(1)
    assert sol.objective == pytest.approx(1)


def test_cheaper_variable_saturates():
    sol = solve_lp(lp([1, 2], [[1, 1]], [EQ], [1], [0, 0], [1, 1]))
    np.testing.assert_allclose(sol.primal, [1, 0], atol=1e-12)
    assert sol.objective == pytest.approx(1)


def test_polygon_vertex():
    problem = lp([3, 2], [[1, 1], [1, 3]], [LE, LE], [4, 6], [0, 0], [math.inf, math.inf], "max")
    # vertices (0,0) (4,0) (3,1) (0,2): objective 0, 12, 11, 4
    sol = solve_lp(problem)
    np.testing.assert_allclose(sol.primal, [4, 0], atol=1e-12)
    assert sol.objective == pytest.approx(12)


def test_infeasible_and_unbounded():
    infeasible = solve_lp(lp([1], [[1], [1]], [LE, GE], [0, 1], [-5], [5]))
    assert infeasible.status == "infeasible"
    assert infeasible.primal is None
    assert infeasible.infeasible_rows
    unbounded = solve_lp(lp([1, 1], [[1, -1]], [LE], [1], [0, 0], [math.inf, math.inf], "max"))
    assert unbounded.status == "unbounded"
    assert unbounded.primal is None


def test_free_variables_and_no_rows():
    sol = solve_lp(lp([1, 0], [[1, 1], [1, -1]], [GE, GE], [2, 0], [-math.inf] * 2, [math.inf] * 2))
    assert sol.objective == pytest.approx(1)
    sol = solve_lp(lp([1, -1], [], [], [], [0, 0], [2, 3]))
    np.testing.assert_allclose(sol.primal, [0, 3])


def test_dimension_checks():
    with pytest.raises(InconsistentDimensions):
        lp([1, 2], [[1, 1, 1]], [LE], [1], [0, 0], [1, 1])
    with pytest.raises(InconsistentDimensions):
        lp([1], [[1]], [LE], [1], [2], [1])


def test_warm_basis_is_reused():
    rng = np.random.default_rng(5)
    A = rng.normal(size=(6, 8))
    problem = lp(rng.normal(size=8), A, [LE] * 6, rng.uniform(1, 2, 6), -np.ones(8), np.ones(8))
    cold = solve_lp(problem)
    again = solve_lp(problem, warm_basis=cold.basis)
    assert again.iterations == 0
    assert again.objective == pytest.approx(cold.objective, abs=1e-10)
    lo = problem.var_lower.copy()
    lo[0] = 0.5
    moved = solve_lp(problem.with_bounds(lo, problem.var_upper), warm_basis=cold.basis)
    fresh = solve_lp(problem.with_bounds(lo, problem.var_upper))
    assert moved.objective == pytest.approx(fresh.objective, abs=1e-9)


def random_lp(rng):
    n = int(rng.integers(1, 7))
    m = int(rng.integers(1, 7))
    A = np.round(rng.normal(size=(m, n)), 2)
    senses = [(LE, GE, EQ)[k] for k in rng.choice(3, size=m, p=[0.6, 0.25, 0.15])]
    lo = np.round(rng.uniform(-3, 0, n), 2)
    hi = lo + np.round(rng.uniform(0.1, 4, n), 2)
    x0 = rng.uniform(lo, hi)
    b = A @ x0
    # perturb part of the rhs so some problems are infeasible or have slack rows
    b = b + np.where(np.array(senses) == LE, rng.uniform(-0.3, 1.5, m),
                     np.where(np.array(senses) == GE, rng.uniform(-1.5, 0.3, m), 0.0))
    c = np.round(rng.normal(size=n), 2)
    return lp(c, A, senses, np.round(b, 3), lo, hi, "max" if rng.random() < 0.5 else "min")


def check_optimality_certificate(problem, sol):
    A, b = problem.constraint_matrix, problem.rhs
    ax = A @ sol.primal
    for i, s in enumerate(problem.row_senses):
        scale = max(1.0, np.abs(A[i]).max())
        if s == LE:
            assert ax[i] <= b[i] + 1e-8 * scale
        elif s == GE:
            assert ax[i] >= b[i] - 1e-8 * scale
        else:
            assert abs(ax[i] - b[i]) <= 1e-8 * scale
    # complementary slackness on rows
    assert np.all(np.abs(sol.duals * (b - ax)) <= 1e-7)
    # strong duality: primal objective == b.y + d.x
    dual_obj = b @ sol.duals + sol.reduced_costs @ sol.primal
    assert dual_obj == pytest.approx(sol.objective, abs=1e-7 * max(1, abs(sol.objective)))
    assert sol.objective == pytest.approx(problem.objective_coeffs @ sol.primal, abs=1e-9)


def test_random_lps_match_vertex_enumeration():
    rng = np.random.default_rng(20240601)
    statuses = []
    for _ in range(200):
        problem = random_lp(rng)
        expected = lp_vertex_enumeration(problem)
        sol = solve_lp(problem)
        statuses.append(sol.status)
        if expected is None:
            assert sol.status == "infeasible"
            assert sol.primal is None
            continue
        assert sol.status == "optimal"
        assert sol.objective == pytest.approx(expected[0], abs=1e-6)
        check_optimality_certificate(problem, sol)
    assert statuses.count("optimal") > 100


def test_dump_layout():
    text = dump_lp(lp([1, -2], [[1, 1]], [LE], [3], [0, -math.inf], [1, math.inf], "max"))
    assert text.splitlines() == [
        "LP max vars=2 rows=1",
        "OBJ           1        -2",
        "R0000         1         1 <=         3",
        "LO            0      -inf",
        "UP            1      +inf",
    ]
