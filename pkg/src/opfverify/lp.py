"""Dense bounded-variable revised simplex.

Every row ``a_i x (<=|=|>=) b_i`` gets a slack ``s_i`` so the working system is
``A x + s = b`` with ``s_i`` in ``[0, inf)``, ``(-inf, 0]`` or ``[0, 0]``.  The
all-slack basis is always nonsingular, so a cold start needs no artificial
columns: phase 1 minimises the sum of bound infeasibilities of the basic
variables (composite method), phase 2 the true objective.

Rows are scaled by their max-abs coefficient before solving; the feasibility
tolerance is therefore relative to the row norm.  Infinite bounds are
``math.inf`` and never replaced by a large number.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import InconsistentDimensions, NumericalBreakdown

LE, EQ, GE = "<=", "=", ">="
OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration_limit"

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-9
DEGENERATE_LIMIT = 50

_AT_LOWER, _AT_UPPER, _FREE, _BASIC = 0, 1, 2, 3


@dataclass(frozen=True)
class LpProblem:
    objective_coeffs: np.ndarray
    constraint_matrix: np.ndarray
    row_senses: tuple
    rhs: np.ndarray
    var_lower: np.ndarray
    var_upper: np.ndarray
    sense: str = "min"

    def __post_init__(self):
        c = np.asarray(self.objective_coeffs, dtype=float).ravel()
        n = c.size
        A = np.asarray(self.constraint_matrix, dtype=float)
        if A.size == 0:
            A = A.reshape(0, n)
        if A.ndim != 2 or A.shape[1] != n:
            raise InconsistentDimensions(f"constraint matrix shape {A.shape} does not match {n} variables")
        m = A.shape[0]
        b = np.asarray(self.rhs, dtype=float).ravel()
        senses = tuple(self.row_senses)
        if b.size != m or len(senses) != m:
            raise InconsistentDimensions(f"{m} rows but {b.size} rhs entries and {len(senses)} senses")
        bad = [s for s in senses if s not in (LE, EQ, GE)]
        if bad:
            raise InconsistentDimensions(f"unknown row senses {sorted(set(bad))}")
        lo = np.asarray(self.var_lower, dtype=float).ravel()
        hi = np.asarray(self.var_upper, dtype=float).ravel()
        if lo.size != n or hi.size != n:
            raise InconsistentDimensions("variable bound vectors must have one entry per variable")
        if np.any(lo > hi):
            raise InconsistentDimensions(f"var_lower > var_upper at {np.flatnonzero(lo > hi).tolist()}")
        if self.sense not in ("min", "max"):
            raise InconsistentDimensions(f"sense must be 'min' or 'max', got {self.sense!r}")
        for name, value in (("objective_coeffs", c), ("constraint_matrix", A), ("rhs", b),
                            ("var_lower", lo), ("var_upper", hi)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "row_senses", senses)

    @property
    def n_vars(self):
        return self.objective_coeffs.size

    @property
    def n_rows(self):
        return self.rhs.size

    def with_bounds(self, lower, upper):
        return LpProblem(self.objective_coeffs, self.constraint_matrix, self.row_senses,
                         self.rhs, lower, upper, self.sense)


@dataclass(frozen=True)
class Basis:
    """Basic column indices over ``[structural | slack]`` plus nonbasics resting at upper."""

    basic: tuple
    at_upper: frozenset = frozenset()


@dataclass
class LpSolution:
    status: str
    primal: np.ndarray = None
    objective: float = math.nan
    duals: np.ndarray = None
    reduced_costs: np.ndarray = None
    basis: Basis = None
    iterations: int = 0
    infeasible_rows: tuple = field(default_factory=tuple)

    @property
    def optimal(self):
        return self.status == OPTIMAL


class _Singular(Exception):
    pass


class _Simplex:
    def __init__(self, problem, max_iter):
        A = problem.constraint_matrix
        m, n = A.shape
        self.m, self.n = m, n
        scale = np.abs(A).max(axis=1) if m else np.ones(0)
        scale[scale == 0] = 1.0
        self.row_scale = scale
        self.A = np.hstack([A / scale[:, None], np.eye(m)])
        self.b = problem.rhs / scale
        sign = 1.0 if problem.sense == "min" else -1.0
        self.sign = sign
        self.c = np.concatenate([sign * problem.objective_coeffs, np.zeros(m)])
        slack_lo = np.array([0.0 if s in (LE, EQ) else -math.inf for s in problem.row_senses])
        slack_hi = np.array([0.0 if s in (GE, EQ) else math.inf for s in problem.row_senses])
        self.lo = np.concatenate([problem.var_lower, slack_lo])
        self.hi = np.concatenate([problem.var_upper, slack_hi])
        self.max_iter = max_iter
        self.iterations = 0
        self.bland = False

    # -- basis handling -------------------------------------------------
    def cold_start(self):
        n, m = self.n, self.m
        state = np.empty(n + m, dtype=np.int8)
        for j in range(n + m):
            state[j] = self._resting_state(j, prefer_upper=False)
        basic = np.arange(n, n + m)
        state[basic] = _BASIC
        self.basic = basic
        self.state = state

    def warm_start(self, basis):
        total = self.n + self.m
        basic = np.asarray(basis.basic, dtype=int)
        if basic.size != self.m or len(set(basic.tolist())) != self.m:
            return False
        if basic.size and (basic.min() < 0 or basic.max() >= total):
            return False
        state = np.empty(total, dtype=np.int8)
        for j in range(total):
            state[j] = self._resting_state(j, prefer_upper=j in basis.at_upper)
        state[basic] = _BASIC
        self.basic = basic.copy()
        self.state = state
        try:
            self._factor()
        except _Singular:
            return False
        return True

    def _resting_state(self, j, prefer_upper):
        lo, hi = self.lo[j], self.hi[j]
        if prefer_upper and math.isfinite(hi):
            return _AT_UPPER
        if math.isfinite(lo):
            return _AT_LOWER
        if math.isfinite(hi):
            return _AT_UPPER
        return _FREE

    def _nonbasic_values(self):
        x = np.zeros(self.n + self.m)
        st = self.state
        low = st == _AT_LOWER
        up = st == _AT_UPPER
        x[low] = self.lo[low]
        x[up] = self.hi[up]
        return x

    def _factor(self):
        B = self.A[:, self.basic]
        lu = lu_factor(B, check_finite=False)
        diag = np.abs(np.diag(lu[0]))
        if diag.size and diag.min() < 1e-11 * max(1.0, diag.max()):
            raise _Singular()
        self.lu = lu
        return lu

    def _point(self):
        x = self._nonbasic_values()
        x[self.basic] = 0.0
        rhs = self.b - self.A @ x
        x[self.basic] = lu_solve(self.lu, rhs, check_finite=False)
        return x

    # -- iterations -----------------------------------------------------
    def run(self, phase1):
        degenerate = 0
        while True:
            self._factor()
            x = self._point()
            xb = x[self.basic]
            lob, hib = self.lo[self.basic], self.hi[self.basic]
            if phase1:
                below = xb < lob - FEAS_TOL
                above = xb > hib + FEAS_TOL
                if not (below.any() or above.any()):
                    return OPTIMAL, x
                cost = np.zeros(self.n + self.m)
                cb = above.astype(float) - below.astype(float)
            else:
                cost = self.c
                cb = cost[self.basic]
            y = lu_solve(self.lu, cb, trans=1, check_finite=False)
            d = cost - self.A.T @ y
            entering, direction = self._price(d)
            if entering is None:
                return OPTIMAL, x
            if self.iterations >= self.max_iter:
                return ITERATION_LIMIT, x
            self.iterations += 1
            w = lu_solve(self.lu, self.A[:, entering], check_finite=False)
            step, leave, leave_state = self._ratio(xb, lob, hib, w, entering, direction, phase1)
            if math.isinf(step):
                return UNBOUNDED, x
            if step <= 1e-12:
                degenerate += 1
                if degenerate > DEGENERATE_LIMIT:
                    self.bland = True
            else:
                degenerate = 0
            if leave is None:
                self.state[entering] = _AT_UPPER if direction > 0 else _AT_LOWER
                continue
            leaving = self.basic[leave]
            self.state[leaving] = leave_state
            self.state[entering] = _BASIC
            self.basic[leave] = entering

    def _price(self, d):
        st = self.state
        movable = self.hi > self.lo
        up = movable & ((st == _AT_LOWER) | (st == _FREE)) & (d < -OPT_TOL)
        down = movable & ((st == _AT_UPPER) | (st == _FREE)) & (d > OPT_TOL)
        candidates = np.flatnonzero(up | down)
        if candidates.size == 0:
            return None, 0
        if self.bland:
            j = int(candidates[0])
        else:
            j = int(candidates[np.argmax(np.abs(d[candidates]))])
        return j, (1 if up[j] else -1)

    def _ratio(self, xb, lob, hib, w, entering, direction, phase1):
        rate = -direction * w
        limits = np.full(xb.size, math.inf)
        to_upper = np.zeros(xb.size, dtype=bool)
        dec = rate < -PIVOT_TOL
        inc = rate > PIVOT_TOL
        for i in np.flatnonzero(dec):
            v = xb[i]
            if phase1 and v > hib[i] + FEAS_TOL:
                limits[i] = (v - hib[i]) / -rate[i]
                to_upper[i] = True
            elif v >= lob[i] - FEAS_TOL and math.isfinite(lob[i]):
                limits[i] = max(v - lob[i], 0.0) / -rate[i]
        for i in np.flatnonzero(inc):
            v = xb[i]
            if phase1 and v < lob[i] - FEAS_TOL:
                limits[i] = (lob[i] - v) / rate[i]
            elif v <= hib[i] + FEAS_TOL and math.isfinite(hib[i]):
                limits[i] = max(hib[i] - v, 0.0) / rate[i]
                to_upper[i] = True
        span = self.hi[entering] - self.lo[entering]
        best = limits.min() if limits.size else math.inf
        if span <= best:
            return span, None, None
        ties = np.flatnonzero(limits <= best + 1e-12)
        if self.bland:
            r = int(ties[np.argmin(self.basic[ties])])
        else:
            r = int(ties[np.argmax(np.abs(w[ties]))])
        return best, r, (_AT_UPPER if to_upper[r] else _AT_LOWER)


def _solve_unconstrained(problem):
    c = problem.objective_coeffs
    sign = 1.0 if problem.sense == "min" else -1.0
    x = np.empty(c.size)
    for j, cj in enumerate(sign * c):
        lo, hi = problem.var_lower[j], problem.var_upper[j]
        if cj > 0:
            x[j] = lo
        elif cj < 0:
            x[j] = hi
        else:
            x[j] = lo if math.isfinite(lo) else (hi if math.isfinite(hi) else 0.0)
        if not math.isfinite(x[j]):
            return LpSolution(UNBOUNDED)
    return LpSolution(OPTIMAL, primal=x, objective=float(c @ x), duals=np.zeros(0),
                      reduced_costs=c.copy(), basis=Basis(()))


def solve_lp(problem, warm_basis=None, max_iter=None):
    """Solve ``problem``; ``warm_basis`` (from a previous solve of a problem with the
    same rows) is used as the starting basis when it is nonsingular."""
    if problem.n_rows == 0:
        return _solve_unconstrained(problem)
    if max_iter is None:
        max_iter = 50 * (problem.n_vars + problem.n_rows) + 1000
    attempts = [warm_basis, None] if warm_basis is not None else [None]
    last_error = None
    for attempt, basis in enumerate(attempts + [None]):
        sx = _Simplex(problem, max_iter)
        if basis is None or not sx.warm_start(basis):
            sx.cold_start()
        if attempt == len(attempts):
            sx.bland = True
        try:
            return _finish(problem, sx)
        except (_Singular, np.linalg.LinAlgError) as exc:
            last_error = exc
    raise NumericalBreakdown(f"basis became singular after anti-cycling retries ({last_error!r})")


def _finish(problem, sx):
    status, x = sx.run(phase1=True)
    if status == ITERATION_LIMIT:
        return LpSolution(ITERATION_LIMIT, iterations=sx.iterations)
    xb = x[sx.basic]
    lob, hib = sx.lo[sx.basic], sx.hi[sx.basic]
    bad = (xb < lob - FEAS_TOL) | (xb > hib + FEAS_TOL)
    if bad.any():
        rows = sorted(int(j - sx.n) for j in sx.basic[bad] if j >= sx.n)
        return LpSolution(INFEASIBLE, iterations=sx.iterations, infeasible_rows=tuple(rows))
    status, x = sx.run(phase1=False)
    if status != OPTIMAL:
        return LpSolution(status, iterations=sx.iterations)
    y = lu_solve(sx.lu, sx.c[sx.basic], trans=1, check_finite=False)
    d = sx.c - sx.A.T @ y
    primal = x[: sx.n].copy()
    # clamp round-off outside the box; basic values can sit FEAS_TOL beyond a bound
    primal = np.minimum(np.maximum(primal, problem.var_lower), problem.var_upper)
    at_upper = frozenset(int(j) for j in np.flatnonzero(sx.state == _AT_UPPER))
    return LpSolution(
        OPTIMAL,
        primal=primal,
        objective=float(problem.objective_coeffs @ primal),
        duals=sx.sign * y / sx.row_scale,
        reduced_costs=sx.sign * d[: sx.n],
        basis=Basis(tuple(int(j) for j in sx.basic), at_upper),
        iterations=sx.iterations,
    )


def dump_lp(problem):
    """Fixed-layout text rendering used for golden-file comparisons."""

    def num(v):
        if math.isinf(v):
            return "     +inf" if v > 0 else "     -inf"
        return f"{v:9.4g}"

    lines = [f"LP {problem.sense} vars={problem.n_vars} rows={problem.n_rows}"]
    lines.append("OBJ   " + " ".join(num(v) for v in problem.objective_coeffs))
    for i in range(problem.n_rows):
        coeffs = " ".join(num(v) for v in problem.constraint_matrix[i])
        lines.append(f"R{i:04d} {coeffs} {problem.row_senses[i]:>2} {num(problem.rhs[i])}")
    lines.append("LO    " + " ".join(num(v) for v in problem.var_lower))
    lines.append("UP    " + " ".join(num(v) for v in problem.var_upper))
    return "\n".join(lines) + "\n"
