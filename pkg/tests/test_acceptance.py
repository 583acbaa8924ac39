"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary (see conftest.py).

All criteria except 6 and 7 share one benchmark of 50 random tiny instances
(grids with at most 5 buses, at most 2 hidden layers of width at most 6, at most
12 unstable ReLUs), computed once per session.
"""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from instances import random_instance
from opfverify.attack import FLOW, AttackConfig, Objective, run_attack
from opfverify.bounds import CROWN, OBBT, ibp, tighten_all
from opfverify.dataset import SPLITS, generate_dataset, lhs_sample, split_counts
from opfverify.dcopf import solve_dcopf
from opfverify.grid import bundled_grid, load_network
from opfverify.lp import solve_lp
from opfverify.milp import BnbLimits
from opfverify.nn import backward
from opfverify.verify import (PB, line_violation, pattern_enumeration_oracle, power_balance_violation,
                              verify_line_flow, verify_power_balance)
from oracles import lp_vertex_enumeration
from test_attack import fd_gradient
from test_dataset import strata_counts
from test_grid_dcopf import TWO_BUS
from test_lp import random_lp
from test_nn import finite_difference, random_model

N_INSTANCES = 50
N_ANYTIME = 20
NODE_BUDGETS = (1, 2, 4, 8, 16)


@dataclass
class Case:
    inst: object
    tables: dict
    oracle: dict                     # target -> exact optimum (target is "pb" or a line index)
    exact: dict                      # target -> VerifyResult, IBP bounds, cold
    root: dict                       # method -> VerifyResult for "pb", cold
    cold: dict                       # target -> VerifyResult, CROWN bounds, cold
    warm: dict                       # target -> VerifyResult, CROWN bounds, PGA warm start
    pga: dict                        # target -> (pga value, dataset value)
    anytime: list = field(default_factory=list)   # (budget, target, VerifyResult)


@dataclass
class Bench:
    cases: list
    exactness_seconds: float


def _violation(model, network, target, pd):
    if target == PB:
        return float(power_balance_violation(model, pd)[0])
    return float(line_violation(model, network, pd, target)[0])


def _build_case(seed, anytime):
    inst = random_instance(seed)
    model, net, lo, hi = inst.model, inst.network, inst.lower, inst.upper
    t_ibp = ibp(model, lo, hi)
    tables = {"ibp": t_ibp, "crown": tighten_all(model, lo, hi, CROWN),
              "obbt": tighten_all(model, lo, hi, OBBT, per_neuron_budget=None, skip_stable=False)}
    targets = [PB] + list(range(net.n_branch))
    oracle, exact, cold, warm, pga = {}, {}, {}, {}, {}
    start = time.perf_counter()
    for t in targets:
        oracle[t] = pattern_enumeration_oracle(model, net, lo, hi, target=t)[0]
        exact[t] = (verify_power_balance(model, t_ibp, lo, hi) if t == PB
                    else verify_line_flow(model, net, t_ibp, lo, hi, t))
    exact_time = time.perf_counter() - start
    root = {m: verify_power_balance(model, tables[m], lo, hi) for m in ("ibp", "crown")}
    for t in targets:
        config = AttackConfig() if t == PB else AttackConfig(objective=FLOW, line=t)
        attack = run_attack(model, net, lo, hi, inst.dataset.pd, config)
        pga[t] = (attack.best_value, attack.dataset_best, attack.best_pd)
        if t == PB:
            cold[t] = root["crown"]
            warm[t] = verify_power_balance(model, tables["crown"], lo, hi, warm=attack.best_pd)
        else:
            cold[t] = verify_line_flow(model, net, tables["crown"], lo, hi, t)
            warm[t] = verify_line_flow(model, net, tables["crown"], lo, hi, t, warm=attack.best_pd)
    case = Case(inst, tables, oracle, exact, root, cold, warm, pga)
    if anytime:
        for budget in NODE_BUDGETS:
            limits = BnbLimits(nodes=budget)
            case.anytime.append((budget, PB, verify_power_balance(model, t_ibp, lo, hi, limits=limits)))
            case.anytime.append((budget, 0, verify_line_flow(model, net, t_ibp, lo, hi, 0, limits=limits)))
    return case, exact_time


@pytest.fixture(scope="module")
def bench():
    cases, seconds = [], 0.0
    for seed in range(N_INSTANCES):
        case, t = _build_case(seed, anytime=seed < N_ANYTIME)
        cases.append(case)
        seconds += t
    return Bench(cases, seconds)


@pytest.mark.criterion(1, "exactness vs pattern-enumeration oracle (50 instances, 1e-6, < 10 min)")
def test_exactness_vs_oracle(bench):
    assert len(bench.cases) >= 50
    for case in bench.cases:
        assert case.inst.model is not None
        assert 1 <= case.tables["ibp"].n_unstable() <= 12
        for target, res in case.exact.items():
            assert res.status == "proved-optimal"
            assert abs(res.primal - case.oracle[target]) <= 1e-6, (case.inst.seed, target)
    assert bench.exactness_seconds < 600


@pytest.mark.criterion(2, "bound dominance OBBT <= CROWN <= IBP per neuron; root dual crown <= ibp")
def test_bound_dominance(bench):
    for case in bench.cases:
        t = case.tables
        for k in range(t["ibp"].n_layers):
            w = {m: t[m].upper[k] - t[m].lower[k] for m in t}
            assert np.all(w["obbt"] <= w["crown"] + 1e-8), (case.inst.seed, k)
            assert np.all(w["crown"] <= w["ibp"] + 1e-8), (case.inst.seed, k)
        assert case.root["crown"].root_dual <= case.root["ibp"].root_dual + 1e-8, case.inst.seed


@pytest.mark.criterion(3, "primal sandwich dataset <= PGA <= optimum; PGA > dataset on >= 60%")
def test_primal_sandwich(bench):
    improved, nonzero = 0, 0
    for case in bench.cases:
        for target, (pga_value, data_value, _) in case.pga.items():
            opt = case.oracle[target]
            assert data_value <= pga_value + 1e-12
            assert pga_value <= opt + 1e-6
        pga_value, data_value, _ = case.pga[PB]
        if case.oracle[PB] > 1e-9:
            nonzero += 1
            improved += pga_value > data_value
    assert nonzero > 0
    assert improved >= 0.6 * nonzero, f"PGA improved on {improved}/{nonzero}"


@pytest.mark.criterion(4, "warm start: nodes(PGA warm) <= nodes(cold); root incumbent == PGA value")
def test_warm_start_effect(bench):
    for case in bench.cases:
        for target, res in case.warm.items():
            assert res.nodes <= case.cold[target].nodes, (case.inst.seed, target)
            pga_value = case.pga[target][0]
            incumbent = res.initial_incumbent if target == PB else max(res.initial_incumbent, 0.0)
            if res.screened:
                continue  # no search runs on a screened line
            assert abs(incumbent - pga_value) <= 1e-9, (case.inst.seed, target)


@pytest.mark.criterion(5, "soundness replay of every witness within 1e-6, budget-exhausted runs included")
def test_soundness_replay(bench):
    runs = exhausted = 0
    for case in bench.cases:
        model, net = case.inst.model, case.inst.network
        groups = [case.exact, case.cold, case.warm, case.root]
        pairs = [(t, r) for g in groups[:3] for t, r in g.items()] + [(PB, r) for r in case.root.values()]
        pairs += [(t, r) for _, t, r in case.anytime]
        for target, res in pairs:
            assert res.witness is not None
            assert abs(_violation(model, net, target, res.witness) - res.primal) <= 1e-6
            assert np.all(res.witness >= case.inst.lower) and np.all(res.witness <= case.inst.upper)
            runs += 1
            exhausted += res.status == "budget-exhausted"
    assert exhausted > 0, "no budget-exhausted runs were exercised"
    assert runs > 0


@pytest.mark.criterion(6, "numerical kernels: backprop and PGA gradients, DC-OPF 1.5, 200 LPs")
def test_numerical_kernels():
    rng = np.random.default_rng(7)
    for _ in range(20):
        model = random_model(rng)
        X = rng.uniform(-1, 1, size=(5, 3))
        Y = rng.normal(size=(5, 2)) * 2
        gw, gb = backward(model, X, Y)
        fw, fb = finite_difference(model, X, Y)
        for a, b in zip(gw + gb, fw + fb):
            np.testing.assert_allclose(a, b, rtol=1e-4, atol=1e-9)

    checked = 0
    for seed in range(10):
        inst = random_instance(200 + seed)
        objectives = [Objective(inst.model, PB)] + [Objective(inst.model, FLOW, inst.network, e)
                                                     for e in range(inst.network.n_branch)]
        points = lhs_sample(5, inst.lower, inst.upper, seed)
        for obj in objectives:
            for x in points:
                f = lambda z: obj.margin(z)[0]  # noqa: E731
                fd, fd_fine = fd_gradient(f, x), fd_gradient(f, x, h=1e-7)
                if not np.allclose(fd, fd_fine, rtol=1e-6, atol=1e-9):
                    continue  # a kink lies within the stencil
                g = obj.gradient(x)[0]
                err = np.linalg.norm(g - fd)
                assert err <= 1e-4 * np.linalg.norm(fd) or err < 1e-8
                checked += 1
    assert checked >= 50

    assert solve_dcopf(load_network(TWO_BUS), np.array([1.0])).cost == 1.5

    rng = np.random.default_rng(20240601)
    for _ in range(200):
        problem = random_lp(rng)
        expected = lp_vertex_enumeration(problem)
        sol = solve_lp(problem)
        if expected is None:
            assert sol.status == "infeasible"
        else:
            assert sol.status == "optimal"
            assert abs(sol.objective - expected[0]) <= 1e-6


@pytest.mark.criterion(7, "protocol: 60-100% load box, LHS strata all ones, 70/10/20 split")
def test_protocol_fidelity():
    net = bundled_grid("case5")
    n = 100
    ds = generate_dataset(net, n, seed=11)
    nominal = net.nominal_loads_pu()
    np.testing.assert_allclose(ds.lower, 0.6 * nominal, rtol=0, atol=1e-15)
    np.testing.assert_allclose(ds.upper, 1.0 * nominal, rtol=0, atol=1e-15)
    raw = lhs_sample(n, ds.lower, ds.upper, 11)
    assert np.all(strata_counts(raw, ds.lower, ds.upper, n) == 1)
    np.testing.assert_array_equal(np.delete(raw, ds.dropped, axis=0), ds.pd)
    counts = tuple(len(ds.indices(s)) for s in SPLITS)
    assert counts == split_counts(len(ds)) == (70, 10, 20)


@pytest.mark.criterion(8, "anytime contract: primal <= dual, dual non-increasing (20 instances x 5 budgets)")
def test_anytime_contract(bench):
    checked = 0
    for case in bench.cases[:N_ANYTIME]:
        by_target = {}
        for budget, target, res in case.anytime:
            assert res.primal <= res.dual + 1e-6
            assert res.dual >= case.oracle[target] - 1e-6   # the dual bound is sound
            duals = [d for _, _, d in res.log]
            primals = [p for _, p, _ in res.log]
            assert all(b <= a + 1e-12 for a, b in zip(duals, duals[1:]))
            assert all(b >= a - 1e-12 for a, b in zip(primals, primals[1:]))
            assert all(p <= d + 1e-6 for p, d in zip(primals, duals))
            by_target.setdefault(target, []).append(res.dual)
            checked += 1
        for duals in by_target.values():
            # a larger budget never yields a weaker final bound
            assert all(b <= a + 1e-9 for a, b in zip(duals, duals[1:]))
    assert checked == N_ANYTIME * len(NODE_BUDGETS) * 2
