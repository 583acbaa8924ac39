"""Pre-activation bounds for every ReLU of the expanded proxy over the demand box.

Three producers: interval arithmetic (IBP), backward linear propagation with
optimisable lower slopes (CROWN with alpha), and per-neuron MILP bound
tightening (OBBT) under a time/node budget.  All of them only ever shrink an
interval, and every table keeps a per-neuron tag of the method that produced
its current interval.
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BudgetZero, EmptyBox, MissingPriorBounds, ShapeMismatch

IBP, CROWN, OBBT = "ibp", "crown", "obbt-milp"
METHODS = (IBP, CROWN, OBBT)


@dataclass
class BoundsTable:
    lower: list
    upper: list
    methods: list
    budget: object = None
    wall_time: float = 0.0

    @classmethod
    def from_intervals(cls, lower, upper, method):
        lower = [np.asarray(v, dtype=float).copy() for v in lower]
        upper = [np.asarray(v, dtype=float).copy() for v in upper]
        return cls(lower, upper, [np.full(v.size, method, dtype=object) for v in lower])

    @classmethod
    def unbounded(cls, model):
        """Placeholder table with infinite intervals, before any bounds are computed."""
        sizes = [w.shape[0] for w, _ in model.relu_layers()]
        return cls.from_intervals([np.full(n, -np.inf) for n in sizes], [np.full(n, np.inf) for n in sizes], "none")

    @property
    def n_layers(self):
        return len(self.lower)

    @property
    def widths(self):
        return [v.size for v in self.lower]

    def copy(self):
        return BoundsTable([v.copy() for v in self.lower], [v.copy() for v in self.upper],
                           [v.copy() for v in self.methods], self.budget, self.wall_time)

    def flags(self, layer):
        lo, hi = self.lower[layer], self.upper[layer]
        return np.where(lo >= 0, "active", np.where(hi <= 0, "inactive", "unstable"))

    def unstable(self, layer):
        return (self.lower[layer] < 0) & (self.upper[layer] > 0)

    def n_unstable(self):
        return int(sum(self.unstable(k).sum() for k in range(self.n_layers)))

    def total_width(self):
        return float(sum(np.sum(hi - lo) for lo, hi in zip(self.lower, self.upper)))

    def refine(self, layer, lower, upper, method, index=None):
        """Intersect with a new interval; neurons whose interval shrank get ``method``."""
        sl = slice(None) if index is None else index
        lo_old, hi_old = self.lower[layer][sl], self.upper[layer][sl]
        lo_new = np.maximum(lo_old, lower)
        hi_new = np.minimum(hi_old, upper)
        # round-off can cross two nearly equal bounds; keep a point interval
        crossed = lo_new > hi_new
        if np.any(crossed):
            mid = 0.5 * (lo_new + hi_new)
            lo_new = np.where(crossed, mid, lo_new)
            hi_new = np.where(crossed, mid, hi_new)
        changed = (lo_new > lo_old) | (hi_new < hi_old)
        self.lower[layer][sl] = lo_new
        self.upper[layer][sl] = hi_new
        tags = self.methods[layer][sl]
        self.methods[layer][sl] = np.where(changed, method, tags)

    def check_model(self, model):
        if self.widths != [w.shape[0] for w, _ in model.relu_layers()]:
            raise ShapeMismatch(f"bounds table layers {self.widths} do not match the model")


def _check_box(lower, upper, model=None):
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if lower.shape != upper.shape:
        raise ShapeMismatch("box lower/upper shapes differ")
    if np.any(lower > upper):
        raise EmptyBox("box lower bound exceeds upper bound")
    if model is not None and lower.size != model.n_input:
        raise ShapeMismatch(f"box has {lower.size} dims, model expects {model.n_input}")
    return lower, upper


def affine_interval(w, b, lo, hi):
    wp, wn = np.maximum(w, 0), np.minimum(w, 0)
    return wp @ lo + wn @ hi + b, wp @ hi + wn @ lo + b


def ibp(model, lower, upper):
    lower, upper = _check_box(lower, upper, model)
    lows, highs = [], []
    lo, hi = lower, upper
    for w, b in model.relu_layers():
        zl, zu = affine_interval(w, b, lo, hi)
        lows.append(zl)
        highs.append(zu)
        lo, hi = np.maximum(zl, 0), np.maximum(zu, 0)
    return BoundsTable.from_intervals(lows, highs, IBP)


def ibp_refresh(model, table, lower, upper, start):
    """Re-run interval arithmetic from layer ``start`` using the table's tightened
    earlier layers, intersecting into the table."""
    if start == 0:
        lo, hi = lower, upper
    else:
        lo, hi = np.maximum(table.lower[start - 1], 0), np.maximum(table.upper[start - 1], 0)
    layers = model.relu_layers()
    for k in range(start, len(layers)):
        w, b = layers[k]
        zl, zu = affine_interval(w, b, lo, hi)
        table.refine(k, zl, zu, IBP)
        lo, hi = np.maximum(table.lower[k], 0), np.maximum(table.upper[k], 0)
    return table


def output_interval(model, table):
    """Interval of the clipped prediction implied by the last ReLU layer bounds."""
    w, b = model.final_affine()
    return affine_interval(w, b, np.maximum(table.lower[-1], 0), np.maximum(table.upper[-1], 0))


# -- CROWN --------------------------------------------------------------------

@dataclass
class AlphaConfig:
    optimize: bool = True
    steps: int = 20
    step_size: float = 0.1


@dataclass
class LinearBoundExpr:
    coeffs: np.ndarray  # (neurons, inputs)
    offset: np.ndarray
    side: str

    def evaluate(self, x):
        return np.atleast_2d(x) @ self.coeffs.T + self.offset

    def concretize(self, lower, upper):
        cp, cn = np.maximum(self.coeffs, 0), np.minimum(self.coeffs, 0)
        if self.side == "lower":
            return cp @ lower + cn @ upper + self.offset
        return cp @ upper + cn @ lower + self.offset


def _relaxation(lo, hi):
    """Triangle upper line (slope, intercept) and the default lower slope."""
    import torch

    active = lo >= 0
    inactive = hi <= 0
    unstable = ~(active | inactive)
    denom = torch.where(unstable, hi - lo, torch.ones_like(hi))
    up_slope = torch.where(active, torch.ones_like(hi), torch.where(unstable, hi / denom, torch.zeros_like(hi)))
    up_icpt = torch.where(unstable, -lo * hi / denom, torch.zeros_like(hi))
    init = torch.where(hi >= -lo, torch.ones_like(hi), torch.zeros_like(hi))
    return active, unstable, up_slope, up_icpt, init


def _backward(layers, bounds, target, x_lo, x_hi, alphas):
    """Linear bounds of layer ``target``'s pre-activation in terms of the input.

    ``alphas[j]`` holds lower-relaxation slopes of earlier layer ``j`` with shape
    (2, n_target, n_j): index 0 for the lower-bound pass, 1 for the upper pass.
    """
    w, b = layers[target]
    lam_l, lam_u = w, w
    off_l, off_u = b, b
    for j in range(target - 1, -1, -1):
        lo, hi = bounds[j]
        active, unstable, su, tu, _ = _relaxation(lo, hi)
        sl_fixed = active.to(w.dtype)
        sl_l = sl_fixed + unstable * alphas[j][0]
        sl_u = sl_fixed + unstable * alphas[j][1]
        pos_l, neg_l = lam_l.clamp(min=0), lam_l.clamp(max=0)
        pos_u, neg_u = lam_u.clamp(min=0), lam_u.clamp(max=0)
        off_l = off_l + neg_l @ tu
        off_u = off_u + pos_u @ tu
        lam_l = pos_l * sl_l + neg_l * su
        lam_u = pos_u * su + neg_u * sl_u
        wj, bj = layers[j]
        off_l = off_l + lam_l @ bj
        off_u = off_u + lam_u @ bj
        lam_l = lam_l @ wj
        lam_u = lam_u @ wj
    lower = lam_l.clamp(min=0) @ x_lo + lam_l.clamp(max=0) @ x_hi + off_l
    upper = lam_u.clamp(min=0) @ x_hi + lam_u.clamp(max=0) @ x_lo + off_u
    return lower, upper, (lam_l, off_l, lam_u, off_u)


def crown_bounds(model, lower, upper, prior, alpha=None):
    """Layer-by-layer CROWN bounds, intersected with ``prior`` (normally IBP)."""
    import torch

    lower, upper = _check_box(lower, upper, model)
    if prior is None:
        raise MissingPriorBounds("CROWN needs prior (IBP) bounds for its relaxations")
    prior.check_model(model)
    alpha = alpha or AlphaConfig()
    table = prior.copy()
    dt = torch.float64
    layers = [(torch.tensor(w, dtype=dt), torch.tensor(b, dtype=dt)) for w, b in model.relu_layers()]
    x_lo, x_hi = torch.tensor(lower, dtype=dt), torch.tensor(upper, dtype=dt)
    for k in range(len(layers)):
        bounds = [(torch.tensor(table.lower[j], dtype=dt), torch.tensor(table.upper[j], dtype=dt))
                  for j in range(k)]
        n_k = layers[k][0].shape[0]
        alphas = []
        for j in range(k):
            init = _relaxation(*bounds[j])[4]
            alphas.append(init.expand(2, n_k, -1).clone())
        with torch.no_grad():
            best_lo, best_hi, _ = _backward(layers, bounds, k, x_lo, x_hi, alphas)
        if alpha.optimize and alpha.steps > 0 and any(_relaxation(*bd)[1].any() for bd in bounds):
            params = [a.requires_grad_(True) for a in alphas]
            opt = torch.optim.Adam(params, lr=alpha.step_size)
            for _ in range(alpha.steps):
                opt.zero_grad()
                lo_k, hi_k, _ = _backward(layers, bounds, k, x_lo, x_hi, params)
                with torch.no_grad():
                    best_lo = torch.maximum(best_lo, lo_k)
                    best_hi = torch.minimum(best_hi, hi_k)
                (hi_k.sum() - lo_k.sum()).backward()
                opt.step()
                with torch.no_grad():
                    for a in params:
                        a.clamp_(0.0, 1.0)
            with torch.no_grad():
                lo_k, hi_k, _ = _backward(layers, bounds, k, x_lo, x_hi, params)
                best_lo = torch.maximum(best_lo, lo_k)
                best_hi = torch.minimum(best_hi, hi_k)
        table.refine(k, best_lo.detach().numpy(), best_hi.detach().numpy(), CROWN)
    return table


def crown_linear_bounds(model, lower, upper, table, layer):
    """CROWN linear bounds of one layer's pre-activations (default slopes)."""
    import torch

    dt = torch.float64
    layers = [(torch.tensor(w, dtype=dt), torch.tensor(b, dtype=dt)) for w, b in model.relu_layers()]
    bounds = [(torch.tensor(table.lower[j], dtype=dt), torch.tensor(table.upper[j], dtype=dt))
              for j in range(layer)]
    n_k = layers[layer][0].shape[0]
    alphas = [_relaxation(*bd)[4].expand(2, n_k, -1) for bd in bounds]
    with torch.no_grad():
        _, _, (lam_l, off_l, lam_u, off_u) = _backward(
            layers, bounds, layer, torch.tensor(lower, dtype=dt), torch.tensor(upper, dtype=dt), alphas)
    return (LinearBoundExpr(lam_l.numpy(), off_l.numpy(), "lower"),
            LinearBoundExpr(lam_u.numpy(), off_u.numpy(), "upper"))


# -- OBBT ---------------------------------------------------------------------

def obbt_milp(model, lower, upper, layer, index, sense, prior, time_limit=10.0, node_limit=None):
    """Bound neuron ``(layer, index)`` by branch-and-bound over the sub-network.

    Returns ``(value, optimal)``; ``value`` is the search's dual bound, which is a
    valid bound whether or not the budget ran out.
    """
    from .milp import BnbLimits, branch_and_bound, encode_neuron_objective

    if (time_limit is not None and time_limit <= 0) or (node_limit is not None and node_limit <= 0):
        raise BudgetZero("OBBT needs a positive time or node budget")
    if prior is None:
        raise MissingPriorBounds("OBBT needs bounds for every earlier layer")
    lower, upper = _check_box(lower, upper, model)
    problem = encode_neuron_objective(model, prior, lower, upper, layer, index, sense)
    result = branch_and_bound(problem, limits=BnbLimits(time=time_limit, nodes=node_limit))
    value = result.dual if sense == "upper" else -result.dual
    return value, result.status == "proved-optimal"


def _obbt_job(args):
    model, lower, upper, layer, index, prior, time_limit, node_limit = args
    lo, lo_opt = obbt_milp(model, lower, upper, layer, index, "lower", prior, time_limit, node_limit)
    hi, hi_opt = obbt_milp(model, lower, upper, layer, index, "upper", prior, time_limit, node_limit)
    return index, lo, hi, lo_opt and hi_opt


def tighten_all(model, lower, upper, method=IBP, per_neuron_budget=10.0, node_budget=None,
                workers=1, skip_stable=True, alpha=None):
    """Full bounds table for ``method``, processed layer by layer.

    OBBT starts from IBP and re-propagates intervals after every layer so that the
    next layer's big-M values use the tightened bounds.
    """
    if method not in METHODS:
        raise ValueError(f"unknown bounds method {method!r}; choose from {METHODS}")
    lower, upper = _check_box(lower, upper, model)
    start = time.perf_counter()
    table = ibp(model, lower, upper)
    if method == CROWN:
        table = crown_bounds(model, lower, upper, table, alpha)
    elif method == OBBT:
        n_layers = table.n_layers
        for k in range(n_layers):
            if k > 0:
                ibp_refresh(model, table, lower, upper, k)
            if k == 0:
                continue  # the first layer is an affine map of the box: IBP is exact
            todo = [i for i in range(table.widths[k]) if not skip_stable or table.unstable(k)[i]]
            jobs = [(model, lower, upper, k, i, table, per_neuron_budget, node_budget) for i in todo]
            if workers > 1 and len(jobs) > 1:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(_obbt_job, jobs))
            else:
                results = [_obbt_job(job) for job in jobs]
            # merge at the layer barrier, in neuron order
            for i, lo, hi, _ in sorted(results, key=lambda r: r[0]):
                table.refine(k, np.array([lo]), np.array([hi]), OBBT, index=slice(i, i + 1))
    table.budget = per_neuron_budget if method == OBBT else None
    table.wall_time = time.perf_counter() - start
    return table


# -- file format --------------------------------------------------------------

def table_to_document(table, method):
    per_neuron = []
    for k in range(table.n_layers):
        flags = table.flags(k)
        for i in range(table.widths[k]):
            per_neuron.append({"layer": k, "index": i, "lo": float(table.lower[k][i]),
                               "hi": float(table.upper[k][i]), "flag": str(flags[i]),
                               "method": str(table.methods[k][i])})
    return {"method": method, "widths": table.widths, "per_neuron": per_neuron,
            "budget": table.budget, "wall_time": table.wall_time}


def table_from_document(doc):
    widths = doc["widths"]
    lower = [np.full(w, -math.inf) for w in widths]
    upper = [np.full(w, math.inf) for w in widths]
    methods = [np.full(w, "", dtype=object) for w in widths]
    for rec in doc["per_neuron"]:
        k, i = rec["layer"], rec["index"]
        lower[k][i], upper[k][i] = rec["lo"], rec["hi"]
        methods[k][i] = rec.get("method", doc["method"])
    return BoundsTable(lower, upper, methods, doc.get("budget"), doc.get("wall_time", 0.0))


def save_bounds(table, method, path):
    Path(path).write_text(json.dumps(table_to_document(table, method), indent=1) + "\n")


def load_bounds(path):
    doc = json.loads(Path(path).read_text())
    return table_from_document(doc), doc["method"]
