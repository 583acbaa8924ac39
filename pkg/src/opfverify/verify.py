"""Worst-case power-balance and line-flow violations of a trained proxy.

Absolute values are handled by solving the two signed maximisation problems
and keeping the larger result.  Every reported primal value is recomputed by
replaying its witness demand through ``nn.forward``.
"""

import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .bounds import output_interval
from .errors import TooManyUnstable
from .grid import compute_ptdf
from .milp import BnbLimits, branch_and_bound, encode_milp
from .nn import forward

PB = "pb"


@dataclass
class VerifyResult:
    target: str
    primal: float
    dual: float
    witness: np.ndarray
    status: str
    nodes: int
    wall_time: float
    root_dual: float = math.nan
    initial_incumbent: float = -math.inf
    bounds_method: str = ""
    warm_source: str = "none"
    log: list = field(default_factory=list)
    screened: bool = False

    @property
    def gap(self):
        return self.dual - self.primal

    def to_document(self):
        doc = {
            "target": self.target, "primal": self.primal, "dual": self.dual, "gap": self.gap,
            "status": self.status, "witness_pd": None if self.witness is None else np.asarray(self.witness).tolist(),
            "nodes": self.nodes, "wall_time": self.wall_time, "bounds_method": self.bounds_method,
            "warm_source": self.warm_source, "root_dual": self.root_dual, "screened": self.screened,
            "node_log": [list(entry) for entry in self.log],
        }
        return _finite(doc)


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def power_balance_violation(model, pd):
    """|sum(pd) - sum(pg_hat)| per row of ``pd``."""
    pd = np.atleast_2d(pd)
    return np.abs(pd.sum(axis=1) - forward(model, pd)[0].sum(axis=1))


def line_flows(model, network, pd, ptdf=None):
    ptdf = ptdf if ptdf is not None else compute_ptdf(network)
    pd = np.atleast_2d(pd)
    pg = forward(model, pd)[0]
    return (pg @ network.gen_matrix().T - pd @ network.load_matrix().T) @ ptdf.matrix.T


def line_violation(model, network, pd, line=None, ptdf=None):
    """max(0, |pf_e| - limit_e) per row; the max over lines when ``line`` is None."""
    flows = line_flows(model, network, pd, ptdf)
    excess = np.maximum(np.abs(flows) - network.flow_limits_pu(), 0.0)
    return excess.max(axis=1) if line is None else excess[:, line]


def _signed_objectives(model, network, target, ptdf):
    """(out_coeffs, pd_coeffs, constant) for each sign of the target expression."""
    n_out, n_in = model.n_output, model.n_input
    if target == PB:
        base = (-np.ones(n_out), np.ones(n_in), 0.0)   # e'pd - e'pg_hat
    else:
        phi = ptdf.matrix[target]
        base = (phi @ network.gen_matrix(), -(phi @ network.load_matrix()), 0.0)
    limit = 0.0 if target == PB else float(network.flow_limits_pu()[target])
    return [(s * base[0], s * base[1], -limit) for s in (1.0, -1.0)]


def _violation_fn(model, network, target, ptdf):
    if target == PB:
        return lambda pd: float(power_balance_violation(model, pd)[0])
    return lambda pd: float(line_violation(model, network, pd, target, ptdf)[0])


def _solve_signed(model, network, table, lower, upper, target, warm, limits, ptdf):
    # the time limit covers both searches: the first gets half, the second the rest
    subs = []
    start = time.perf_counter()
    for idx, (out_c, pd_c, const) in enumerate(_signed_objectives(model, network, target, ptdf)):
        problem = encode_milp(model, table, lower, upper, out_c, pd_c, const)
        sub_limits = limits
        if limits.time is not None:
            budget = limits.time / 2 if idx == 0 else max(limits.time - (time.perf_counter() - start), 1e-3)
            sub_limits = BnbLimits(time=budget, nodes=limits.nodes, gap=limits.gap)
        subs.append(branch_and_bound(problem, incumbent=warm, limits=sub_limits))
    return subs


def _combine(target, subs, violation, clamp_zero, elapsed):
    witnesses = [s.witness for s in subs if s.witness is not None]
    values = [violation(w) for w in witnesses]
    k = int(np.argmax(values))
    primal, witness = values[k], witnesses[k]
    dual = max(s.dual for s in subs)
    if clamp_zero:
        dual = max(dual, 0.0)
    dual = max(dual, primal)
    proved = all(s.status == "proved-optimal" for s in subs)
    # the two searches run back to back; the idle one contributes its root bound
    # while pending and its final bound once done
    log, offset, running = [], 0, max(s.initial_incumbent for s in subs)
    for idx, s in enumerate(subs):
        other = subs[1 - idx].root_dual if idx == 0 else subs[0].dual
        for n, p, d in s.log:
            running = max(running, p)
            log.append((n + offset, running, max(d, other)))
        offset += s.nodes
    return VerifyResult(
        target=target, primal=primal, dual=dual, witness=witness,
        status="proved-optimal" if proved else "budget-exhausted",
        nodes=sum(s.nodes for s in subs), wall_time=elapsed,
        root_dual=max(s.root_dual for s in subs),
        initial_incumbent=max(s.initial_incumbent for s in subs),
        log=log,
    )


def verify_power_balance(model, table, lower, upper, warm=None, limits=None):
    start = time.perf_counter()
    limits = limits or BnbLimits()
    subs = _solve_signed(model, None, table, lower, upper, PB, warm, limits, None)
    res = _combine(PB, subs, _violation_fn(model, None, PB, None), False, time.perf_counter() - start)
    res.warm_source = "given" if warm is not None else "none"
    return res


def screen_line(model, network, table, lower, upper, line, ptdf):
    """True when interval arithmetic proves the line can never exceed its limit."""
    pg_lo, pg_hi = output_interval(model, table)
    phi = ptdf.matrix[line]
    cg = phi @ network.gen_matrix()
    cd = -(phi @ network.load_matrix())
    lo = np.maximum(cg, 0) @ pg_lo + np.minimum(cg, 0) @ pg_hi + np.maximum(cd, 0) @ lower + np.minimum(cd, 0) @ upper
    hi = np.maximum(cg, 0) @ pg_hi + np.minimum(cg, 0) @ pg_lo + np.maximum(cd, 0) @ upper + np.minimum(cd, 0) @ lower
    return max(abs(lo), abs(hi)) <= network.flow_limits_pu()[line]


def verify_line_flow(model, network, table, lower, upper, line, warm=None, limits=None, ptdf=None):
    start = time.perf_counter()
    limits = limits or BnbLimits()
    ptdf = ptdf if ptdf is not None else compute_ptdf(network)
    target = f"line-{line}"
    if screen_line(model, network, table, lower, upper, line, ptdf):
        witness = np.asarray(lower, dtype=float).copy()
        return VerifyResult(target, 0.0, 0.0, witness, "proved-optimal", 0, time.perf_counter() - start,
                            root_dual=0.0, initial_incumbent=0.0, screened=True,
                            warm_source="given" if warm is not None else "none", log=[(0, 0.0, 0.0)])
    subs = _solve_signed(model, network, table, lower, upper, line, warm, limits, ptdf)
    res = _combine(target, subs, _violation_fn(model, network, line, ptdf), True, time.perf_counter() - start)
    res.warm_source = "given" if warm is not None else "none"
    return res


def _line_job(args):
    model, network, table, lower, upper, line, warm, limits = args
    return verify_line_flow(model, network, table, lower, upper, line, warm, limits)


def verify_all_lines(model, network, table, lower, upper, warm_map=None, limits=None, workers=1):
    """Returns ``(v_l, per_line)`` where ``v_l`` is the worst line's result."""
    warm_map = warm_map or {}
    jobs = [(model, network, table, lower, upper, e, warm_map.get(e), limits) for e in range(network.n_branch)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_line = list(pool.map(_line_job, jobs))
    else:
        per_line = [_line_job(job) for job in jobs]
    worst = max(per_line, key=lambda r: r.primal)
    dual = max(r.dual for r in per_line)
    status = "proved-optimal" if all(r.status == "proved-optimal" for r in per_line) else "budget-exhausted"
    summary = VerifyResult("all-lines", worst.primal, dual, worst.witness, status,
                           sum(r.nodes for r in per_line), sum(r.wall_time for r in per_line),
                           root_dual=max(r.root_dual for r in per_line),
                           warm_source="given" if warm_map else "none")
    return summary, per_line


# -- independent oracle -------------------------------------------------------

def _affine_chain(model, pattern):
    """Given 0/1 patterns for the first len(pattern) layers, return the affine maps
    (A_k, c_k) with zhat_k = A_k pd + c_k for each of those layers plus the next."""
    maps = []
    A = np.eye(model.n_input)
    c = np.zeros(model.n_input)
    for k, (w, b) in enumerate(model.relu_layers()):
        A_hat, c_hat = w @ A, w @ c + b
        maps.append((A_hat, c_hat))
        if k == len(pattern):
            break
        mask = pattern[k].astype(float)
        A, c = A_hat * mask[:, None], c_hat * mask
    return maps, (A, c)


def _region_rows(maps, pattern):
    rows, rhs = [], []
    for (A_hat, c_hat), pat in zip(maps, pattern):
        sign = np.where(pat, -1.0, 1.0)  # active: -zhat <= 0, inactive: zhat <= 0
        rows.append(sign[:, None] * A_hat)
        rhs.append(-sign * c_hat)
    if not rows:
        return None, None
    return np.vstack(rows), np.concatenate(rhs)


def pattern_enumeration_oracle(model, network, lower, upper, target=PB, max_unstable=16):
    """Exact worst-case violation by enumerating activation patterns.

    Unstable neurons are identified with interval arithmetic; each pattern is an
    LP over the demand box (solved with HiGHS).  Patterns are grown layer by
    layer and infeasible prefixes are pruned.  Returns ``(value, witness)``.
    """
    from .bounds import ibp

    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    table = ibp(model, lower, upper)
    n_unstable = table.n_unstable()
    if n_unstable > max_unstable:
        raise TooManyUnstable(f"{n_unstable} unstable ReLUs exceeds the oracle limit {max_unstable}")
    box = list(zip(lower, upper))
    ptdf = compute_ptdf(network) if target != PB else None
    objectives = _signed_objectives(model, network, target, ptdf)
    n_layers = table.n_layers

    def feasible(A_ub, b_ub):
        if A_ub is None:
            return True
        res = linprog(np.zeros(model.n_input), A_ub=A_ub, b_ub=b_ub, bounds=box, method="highs")
        return res.status == 0

    best = (-math.inf, None)

    def leaf(pattern):
        nonlocal best
        maps, (A, c) = _affine_chain(model, pattern)
        A_ub, b_ub = _region_rows(maps[:len(pattern)], pattern)
        wf, bf = model.final_affine()
        out_A, out_c = wf @ A, wf @ c + bf  # pg_hat = out_A pd + out_c
        for out_coeffs, pd_coeffs, const in objectives:
            lin = out_coeffs @ out_A + pd_coeffs
            off = out_coeffs @ out_c + const
            res = linprog(-lin, A_ub=A_ub, b_ub=b_ub, bounds=box, method="highs")
            if res.status != 0:
                continue
            value = float(lin @ res.x + off)
            if value > best[0]:
                best = (value, np.clip(res.x, lower, upper))

    def grow(pattern):
        k = len(pattern)
        if k == n_layers:
            leaf(pattern)
            return
        flags = table.flags(k)
        free = np.flatnonzero(flags == "unstable")
        base = flags == "active"
        for bits in itertools.product((False, True), repeat=free.size):
            pat = base.copy()
            pat[free] = bits
            trial = pattern + [pat]
            maps, _ = _affine_chain(model, trial)
            A_ub, b_ub = _region_rows(maps[:len(trial)], trial)
            if feasible(A_ub, b_ub):
                grow(trial)

    grow([])
    value, witness = best
    if target != PB:
        value = max(value, 0.0)
    return value, witness


# -- report file --------------------------------------------------------------

def save_verify_report(path, result, extra=None, per_line=None):
    doc = result.to_document()
    if per_line is not None:
        doc["per_line"] = [r.to_document() for r in per_line]
    if extra:
        doc.update(_finite(extra))
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    return doc
