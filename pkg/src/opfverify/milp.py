"""Big-M MILP encoding of the expanded proxy and a best-first branch-and-bound.

Per ReLU layer ``k`` the encoding has pre-activation variables ``zhat_k`` (tied
to the previous layer by equality rows) and post-activation variables ``z_k``.
For a neuron with bounds ``[l, u]``:

* ``u <= 0``: ``z = 0`` (fixed bounds, no binary)
* ``l >= 0``: ``z = zhat``
* otherwise one binary ``y`` and::

      z <= zhat - l (1 - y)
      z >= zhat
      z <= u y
      z >= 0

All problems are posed as maximisation.
"""

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import RelaxationUnbounded, UnboundedNeuron
from .lp import EQ, GE, LE, LpProblem, solve_lp
from .nn import forward

INTEGRALITY_TOL = 1e-9


@dataclass
class MilpProblem:
    relaxation: LpProblem           # sense "max"
    binaries: np.ndarray            # variable indices, ordered by (layer, neuron)
    binary_neurons: list            # (layer, index) per binary
    constant: float                 # objective offset not carried by the LP
    var_map: dict                   # "pd" -> indices, ("zhat", k) / ("z", k) -> indices
    evaluate: object = None         # demand -> exact objective value (forward replay)

    @property
    def n_binaries(self):
        return int(self.binaries.size)

    def demand(self, x):
        return x[self.var_map["pd"]]


class _Builder:
    def __init__(self):
        self.lo, self.hi = [], []
        self.rows, self.senses, self.rhs = [], [], []

    def add_vars(self, lo, hi):
        start = len(self.lo)
        self.lo.extend(np.asarray(lo, dtype=float).tolist())
        self.hi.extend(np.asarray(hi, dtype=float).tolist())
        return np.arange(start, len(self.lo))

    def add_row(self, coeffs, sense, rhs):
        self.rows.append(coeffs)
        self.senses.append(sense)
        self.rhs.append(rhs)

    def build(self, objective):
        n = len(self.lo)
        A = np.zeros((len(self.rows), n))
        for r, coeffs in enumerate(self.rows):
            for j, v in coeffs.items():
                A[r, j] += v
        c = np.zeros(n)
        for j, v in objective.items():
            c[j] += v
        return LpProblem(c, A, tuple(self.senses), np.array(self.rhs, dtype=float),
                         np.array(self.lo), np.array(self.hi), "max")


def _encode_layers(model, table, lower, upper, n_layers):
    layers = model.relu_layers()
    bld = _Builder()
    var_map = {"pd": bld.add_vars(lower, upper)}
    prev = var_map["pd"]
    binaries, neurons = [], []
    for k in range(n_layers):
        w, b = layers[k]
        lo_k, hi_k = table.lower[k], table.upper[k]
        if not (np.all(np.isfinite(lo_k)) and np.all(np.isfinite(hi_k))):
            raise UnboundedNeuron(f"layer {k} has infinite pre-activation bounds")
        zhat = bld.add_vars(lo_k, hi_k)
        z = bld.add_vars(np.maximum(lo_k, 0.0), np.maximum(hi_k, 0.0))
        var_map[("zhat", k)] = zhat
        var_map[("z", k)] = z
        for i in range(w.shape[0]):
            coeffs = {int(zhat[i]): 1.0}
            for j, wij in enumerate(w[i]):
                if wij != 0.0:
                    coeffs[int(prev[j])] = coeffs.get(int(prev[j]), 0.0) - wij
            bld.add_row(coeffs, EQ, float(b[i]))
        for i in range(w.shape[0]):
            l, u = float(lo_k[i]), float(hi_k[i])
            zi, hi_var = int(z[i]), int(zhat[i])
            if u <= 0:
                continue  # z fixed to [0, 0] by its bounds
            if l >= 0:
                bld.add_row({zi: 1.0, hi_var: -1.0}, EQ, 0.0)
                continue
            y = int(bld.add_vars([0.0], [1.0])[0])
            bld.add_row({zi: 1.0, hi_var: -1.0, y: -l}, LE, -l)   # z <= zhat - l (1 - y)
            bld.add_row({zi: 1.0, hi_var: -1.0}, GE, 0.0)         # z >= zhat
            bld.add_row({zi: 1.0, y: -u}, LE, 0.0)                # z <= u y
            binaries.append(y)
            neurons.append((k, i))
        prev = z
    return bld, var_map, binaries, neurons


def encode_milp(model, table, lower, upper, out_coeffs, pd_coeffs, constant=0.0, evaluate=None):
    """Encode ``max out_coeffs . pg_hat + pd_coeffs . pd + constant`` over the box."""
    table.check_model(model)
    n_layers = len(model.relu_layers())
    bld, var_map, binaries, neurons = _encode_layers(model, table, lower, upper, n_layers)
    wf, bf = model.final_affine()
    out_coeffs = np.asarray(out_coeffs, dtype=float)
    # pg_hat = wf z_last + bf
    obj = {}
    z_last = var_map[("z", n_layers - 1)]
    for j, v in enumerate(out_coeffs @ wf):
        if v != 0.0:
            obj[int(z_last[j])] = obj.get(int(z_last[j]), 0.0) + float(v)
    for j, v in enumerate(np.asarray(pd_coeffs, dtype=float)):
        if v != 0.0:
            obj[int(var_map["pd"][j])] = obj.get(int(var_map["pd"][j]), 0.0) + float(v)
    const = float(constant + out_coeffs @ bf)
    if evaluate is None:
        def evaluate(pd):
            return float(out_coeffs @ forward(model, pd)[0] + np.dot(pd_coeffs, pd) + constant)
    return MilpProblem(bld.build(obj), np.array(binaries, dtype=int), neurons, const, var_map, evaluate)


def encode_neuron_objective(model, table, lower, upper, layer, index, sense):
    """MILP whose optimum is the max (``sense='upper'``) or minus the min
    (``sense='lower'``) of one neuron's pre-activation."""
    bld, var_map, binaries, neurons = _encode_layers(model, table, lower, upper, layer)
    w, b = model.relu_layers()[layer]
    sign = 1.0 if sense == "upper" else -1.0
    prev = var_map[("z", layer - 1)] if layer else var_map["pd"]
    obj = {int(prev[j]): sign * float(v) for j, v in enumerate(w[index]) if v != 0.0}

    def evaluate(pd):
        _, trace = forward(model, pd)
        return sign * float(trace.pre[layer][index])

    return MilpProblem(bld.build(obj), np.array(binaries, dtype=int), neurons,
                       sign * float(b[index]), var_map, evaluate)


@dataclass
class BnbLimits:
    time: float = None
    nodes: int = None
    gap: float = 1e-6


@dataclass
class BnbResult:
    primal: float
    dual: float
    witness: np.ndarray
    status: str                  # proved-optimal | budget-exhausted | infeasible
    nodes: int
    wall_time: float
    root_dual: float
    initial_incumbent: float
    log: list = field(default_factory=list)   # (nodes, primal, dual) after each node

    @property
    def gap(self):
        return self.dual - self.primal


def _branch_variable(problem, x):
    vals = x[problem.binaries]
    frac = np.abs(vals - np.round(vals))
    candidates = np.flatnonzero(frac > INTEGRALITY_TOL)
    if candidates.size == 0:
        return None
    # nearest to 0.5; argmin keeps the earliest (layer, index) on ties
    return int(candidates[np.argmin(np.abs(vals[candidates] - 0.5))])


def branch_and_bound(problem, incumbent=None, limits=None):
    """Best-first branch-and-bound on the big-M relaxation.

    ``incumbent`` is an optional witness demand installed before the root.  The
    returned dual bound is valid at every interruption point.
    """
    limits = limits or BnbLimits()
    start = time.perf_counter()
    base_lo = problem.relaxation.var_lower.copy()
    base_hi = problem.relaxation.var_upper.copy()
    best_val, best_x = -math.inf, None
    if incumbent is not None:
        best_x = np.asarray(incumbent, dtype=float).copy()
        best_val = problem.evaluate(best_x)
    initial = best_val
    nodes = 0
    log = []
    counter = itertools.count()

    def offer(pd):
        nonlocal best_val, best_x
        value = problem.evaluate(pd)
        if value > best_val:
            best_val, best_x = value, pd.copy()

    def solve_node(fixings, basis):
        lo, hi = base_lo.copy(), base_hi.copy()
        for var, val in fixings:
            lo[var] = hi[var] = val
        sol = solve_lp(problem.relaxation.with_bounds(lo, hi), warm_basis=basis)
        if sol.status == "unbounded":
            raise RelaxationUnbounded("LP relaxation is unbounded")
        return sol

    def elapsed():
        return time.perf_counter() - start

    def out_of_budget():
        if limits.nodes is not None and nodes >= limits.nodes:
            return True
        return limits.time is not None and elapsed() >= limits.time

    root = solve_node((), None)
    nodes = 1
    if not root.optimal:
        return BnbResult(-math.inf, -math.inf, best_x, "infeasible", nodes, elapsed(), -math.inf, initial, log)
    root_bound = root.objective + problem.constant
    heap = []
    offer(problem.demand(root.primal))
    if _branch_variable(problem, root.primal) is not None:
        heapq.heappush(heap, (-root_bound, next(counter), (), root))
    status = "budget-exhausted"
    dual = max(best_val, root_bound) if heap else best_val
    log.append((nodes, best_val, dual))
    while True:
        top = -heap[0][0] if heap else -math.inf
        dual = min(dual, max(best_val, top))
        if not heap or top - best_val <= limits.gap:
            status = "proved-optimal"
            break
        if out_of_budget():
            break
        neg_bound, _, fixings, sol = heapq.heappop(heap)
        parent_bound = -neg_bound
        if parent_bound - best_val <= limits.gap:
            continue
        var = int(problem.binaries[_branch_variable(problem, sol.primal)])
        for val in (0.0, 1.0):
            child_fix = fixings + ((var, val),)
            child = solve_node(child_fix, sol.basis)
            nodes += 1
            if not child.optimal:
                continue
            bound = min(child.objective + problem.constant, parent_bound)
            offer(problem.demand(child.primal))
            if _branch_variable(problem, child.primal) is None:
                continue  # integral: the relaxation point is an exact network trace
            if bound - best_val > limits.gap:
                heapq.heappush(heap, (-bound, next(counter), child_fix, child))
        top = -heap[0][0] if heap else -math.inf
        dual = min(dual, max(best_val, top))
        log.append((nodes, best_val, dual))
    dual = max(dual, best_val)
    if log[-1] != (nodes, best_val, dual):
        log.append((nodes, best_val, dual))
    return BnbResult(best_val, dual, best_x, status, nodes, elapsed(), root_bound, initial, log)
