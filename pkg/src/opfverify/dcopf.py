"""DC optimal power flow: minimise generation cost subject to balance,
generator limits and two-sided thermal limits on every branch."""

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible
from .grid import compute_ptdf
from .lp import EQ, LE, LpProblem, solve_lp


@dataclass(frozen=True)
class Dispatch:
    pg: np.ndarray
    cost: float
    flows: np.ndarray
    balance_price: float = float("nan")


def dcopf_problem(network, demand, ptdf=None):
    """LP over the generator set-points.  Row 0 is power balance, then
    ``Phi_g pg <= limit + Phi_d pd`` and ``-Phi_g pg <= limit - Phi_d pd`` per branch."""
    demand = np.asarray(demand, dtype=float)
    if ptdf is None:
        ptdf = compute_ptdf(network)
    phi = ptdf.matrix
    phi_g = phi @ network.gen_matrix()
    load_flow = phi @ (network.load_matrix() @ demand)
    limits = network.flow_limits_pu()
    G = network.n_gen
    A = np.vstack([np.ones((1, G)), phi_g, -phi_g])
    rhs = np.concatenate([[demand.sum()], limits + load_flow, limits - load_flow])
    senses = (EQ,) + (LE,) * (2 * network.n_branch)
    lo, hi = network.gen_bounds_pu()
    return LpProblem(network.gen_costs_pu(), A, senses, rhs, lo, hi, "min")


def solve_dcopf(network, demand, ptdf=None):
    demand = np.asarray(demand, dtype=float)
    if demand.shape != (network.n_load,):
        raise ValueError(f"demand must have {network.n_load} entries")
    if np.any(demand < 0):
        raise ValueError("demand must be nonnegative")
    if ptdf is None:
        ptdf = compute_ptdf(network)
    sol = solve_lp(dcopf_problem(network, demand, ptdf))
    if not sol.optimal:
        names = ["balance"] + [f"flow+[{e}]" for e in range(network.n_branch)] + \
                [f"flow-[{e}]" for e in range(network.n_branch)]
        rows = [names[i] for i in sol.infeasible_rows]
        raise Infeasible(f"DC-OPF {sol.status} for demand total {demand.sum():.6g} p.u.", rows)
    pg = sol.primal
    flows = ptdf.matrix @ (network.gen_matrix() @ pg - network.load_matrix() @ demand)
    return Dispatch(pg, float(sol.objective), flows, float(sol.duals[0]))


def check_dispatch(network, demand, dispatch, ptdf=None, tol=1e-8):
    """Return the list of violated dispatch invariants (empty when valid)."""
    if ptdf is None:
        ptdf = compute_ptdf(network)
    lo, hi = network.gen_bounds_pu()
    pg = np.asarray(dispatch.pg if hasattr(dispatch, "pg") else dispatch, dtype=float)
    issues = []
    if abs(pg.sum() - np.sum(demand)) > tol:
        issues.append(f"balance mismatch {pg.sum() - np.sum(demand):.3e}")
    if np.any(pg < lo - tol) or np.any(pg > hi + tol):
        issues.append("generator limit violated")
    flows = ptdf.matrix @ (network.gen_matrix() @ pg - network.load_matrix() @ np.asarray(demand))
    if np.any(np.abs(flows) > network.flow_limits_pu() + tol):
        issues.append("thermal limit violated")
    return issues
