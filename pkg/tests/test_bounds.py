import numpy as np
import pytest
import torch

from instances import random_instance
from opfverify.bounds import (CROWN, IBP, OBBT, AlphaConfig, BoundsTable, _relaxation, crown_bounds,
                              crown_linear_bounds, ibp, load_bounds, obbt_milp, output_interval, save_bounds,
                              tighten_all)
from opfverify.dataset import lhs_sample
from opfverify.errors import BudgetZero, EmptyBox, MissingPriorBounds
from opfverify.nn import MlpModel, forward
from oracles import neuron_range_by_patterns


def test_ibp_single_layer_example():
    model = MlpModel([[[1.0, -1.0]], [[1.0]]], [[0.0], [0.0]], [-5.0], [5.0])
    table = ibp(model, [0, 0], [1, 1])
    assert table.lower[0][0] == -1 and table.upper[0][0] == 1
    # post-ReLU [0, 1] feeds the first clip ReLU: w=1, b=0-(-5)
    assert table.lower[1][0] == 5 and table.upper[1][0] == 6


def test_ibp_identity_exact():
    model = MlpModel([[[1.0]], [[1.0]]], [[0.0], [0.0]], [0.0], [10.0])
    table = ibp(model, [0.0], [1.0])
    lo, hi = output_interval(model, table)
    assert lo[0] == 0 and hi[0] == 1


def test_ibp_empty_box():
    model = MlpModel([[[1.0]], [[1.0]]], [[0.0], [0.0]], [0.0], [10.0])
    with pytest.raises(EmptyBox):
        ibp(model, [1.0], [0.0])


def test_triangle_relaxation_formula():
    active, unstable, slope, icpt, init = _relaxation(torch.tensor([-1.0, 0.5, -3.0]), torch.tensor([1.0, 2.0, 1.0]))
    assert unstable.tolist() == [True, False, True]
    assert slope[0].item() == 0.5 and icpt[0].item() == 0.5
    assert slope[1].item() == 1.0 and icpt[1].item() == 0.0
    assert init.tolist() == [1.0, 1.0, 0.0]   # alpha = 1 iff u >= -l


def test_crown_stable_active_is_exact():
    w1 = np.array([[1.0, 2.0], [0.5, -1.0]])
    w2 = np.array([[1.0, -1.0], [2.0, 1.0]])
    model = MlpModel([w1, w2, np.eye(2)], [np.array([0.0, 3.0]), np.zeros(2), np.zeros(2)],
                     [-100.0, -100.0], [100.0, 100.0])
    lower, upper = np.zeros(2), np.ones(2)
    table = crown_bounds(model, lower, upper, ibp(model, lower, upper))
    assert np.all(table.lower[0] >= 0)   # layer 0 stable active
    comp = w2 @ w1
    exact_lo = np.minimum(comp, 0).sum(axis=1) + w2 @ np.array([0.0, 3.0])
    exact_hi = np.maximum(comp, 0).sum(axis=1) + w2 @ np.array([0.0, 3.0])
    np.testing.assert_allclose(table.lower[1], exact_lo, atol=1e-12)
    np.testing.assert_allclose(table.upper[1], exact_hi, atol=1e-12)


def test_crown_requires_prior():
    inst = random_instance(0)
    with pytest.raises(MissingPriorBounds):
        crown_bounds(inst.model, inst.lower, inst.upper, None)


def assert_sound(model, table, lower, upper, n=1000, seed=0):
    pts = lhs_sample(n, lower, upper, seed)
    _, trace = forward(model, pts)
    for k, pre in enumerate(trace.pre):
        assert np.all(pre >= table.lower[k] - 1e-9)
        assert np.all(pre <= table.upper[k] + 1e-9)
        active = table.flags(k) == "active"
        assert np.all(pre[:, active] >= -1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_soundness_all_methods(seed):
    inst = random_instance(seed)
    for method in (IBP, CROWN, OBBT):
        table = tighten_all(inst.model, inst.lower, inst.upper, method, per_neuron_budget=None)
        assert_sound(inst.model, table, inst.lower, inst.upper, seed=seed)
        for lo, hi in zip(table.lower, table.upper):
            assert np.all(lo <= hi)


@pytest.mark.parametrize("seed", range(5))
def test_linear_bound_expressions_sound(seed):
    inst = random_instance(seed)
    table = ibp(inst.model, inst.lower, inst.upper)
    pts = lhs_sample(500, inst.lower, inst.upper, seed)
    _, trace = forward(inst.model, pts)
    for k in range(table.n_layers):
        low, up = crown_linear_bounds(inst.model, inst.lower, inst.upper, table, k)
        assert np.all(low.evaluate(pts) <= trace.pre[k] + 1e-9)
        assert np.all(up.evaluate(pts) >= trace.pre[k] - 1e-9)
        assert np.all(low.concretize(inst.lower, inst.upper) <= low.evaluate(pts).min(axis=0) + 1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_dominance_chain(seed):
    inst = random_instance(seed)
    t_ibp = ibp(inst.model, inst.lower, inst.upper)
    t_crown = tighten_all(inst.model, inst.lower, inst.upper, CROWN)
    t_obbt = tighten_all(inst.model, inst.lower, inst.upper, OBBT, per_neuron_budget=None, skip_stable=False)
    assert t_crown.total_width() <= t_ibp.total_width() + 1e-8
    for k in range(t_ibp.n_layers):
        w_i = t_ibp.upper[k] - t_ibp.lower[k]
        w_c = t_crown.upper[k] - t_crown.lower[k]
        w_o = t_obbt.upper[k] - t_obbt.lower[k]
        assert np.all(w_o <= w_c + 1e-8)
        assert np.all(w_c <= w_i + 1e-8)


def test_method_ibp_identical_to_ibp():
    inst = random_instance(4)
    a, b = ibp(inst.model, inst.lower, inst.upper), tighten_all(inst.model, inst.lower, inst.upper, IBP)
    for k in range(a.n_layers):
        np.testing.assert_array_equal(a.lower[k], b.lower[k])
        np.testing.assert_array_equal(a.upper[k], b.upper[k])


def test_obbt_first_layer_matches_ibp():
    inst = random_instance(1)
    table = ibp(inst.model, inst.lower, inst.upper)
    for i in range(table.widths[0]):
        lo, opt_lo = obbt_milp(inst.model, inst.lower, inst.upper, 0, i, "lower", table)
        hi, opt_hi = obbt_milp(inst.model, inst.lower, inst.upper, 0, i, "upper", table)
        assert opt_lo and opt_hi
        assert lo == pytest.approx(table.lower[0][i], abs=1e-9)
        assert hi == pytest.approx(table.upper[0][i], abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_obbt_unbounded_budget_equals_enumeration(seed):
    inst = random_instance(seed)
    table = ibp(inst.model, inst.lower, inst.upper)
    for k in range(1, table.n_layers):
        for i in range(table.widths[k]):
            lo_exact, hi_exact = neuron_range_by_patterns(inst.model, inst.lower, inst.upper, k, i)
            lo, opt_lo = obbt_milp(inst.model, inst.lower, inst.upper, k, i, "lower", table, time_limit=None)
            hi, opt_hi = obbt_milp(inst.model, inst.lower, inst.upper, k, i, "upper", table, time_limit=None)
            assert opt_lo and opt_hi
            assert lo == pytest.approx(lo_exact, abs=1e-6)
            assert hi == pytest.approx(hi_exact, abs=1e-6)


@pytest.mark.parametrize("seed", range(4))
def test_obbt_budget_monotone(seed):
    inst = random_instance(seed)
    table = ibp(inst.model, inst.lower, inst.upper)
    k = table.n_layers - 1
    for i in range(table.widths[k]):
        exact, _ = obbt_milp(inst.model, inst.lower, inst.upper, k, i, "upper", table, time_limit=None)
        previous = np.inf
        for nodes in (1, 2, 4, 16, None):
            val, _ = obbt_milp(inst.model, inst.lower, inst.upper, k, i, "upper", table,
                               time_limit=None, node_limit=nodes)
            assert val >= exact - 1e-9
            assert val <= previous + 1e-9
            previous = val


def test_budget_zero():
    inst = random_instance(0)
    table = ibp(inst.model, inst.lower, inst.upper)
    with pytest.raises(BudgetZero):
        obbt_milp(inst.model, inst.lower, inst.upper, 1 % table.n_layers, 0, "upper", table, time_limit=0)
    with pytest.raises(MissingPriorBounds):
        obbt_milp(inst.model, inst.lower, inst.upper, 0, 0, "upper", None)


def test_refine_only_shrinks():
    table = BoundsTable.from_intervals([np.array([-1.0, -2.0])], [np.array([1.0, 2.0])], IBP)
    table.refine(0, np.array([-3.0, -1.0]), np.array([0.5, 3.0]), CROWN)
    np.testing.assert_array_equal(table.lower[0], [-1.0, -1.0])
    np.testing.assert_array_equal(table.upper[0], [0.5, 2.0])
    assert table.methods[0].tolist() == [CROWN, CROWN]
    table.refine(0, np.array([-5.0, -5.0]), np.array([5.0, 5.0]), OBBT)
    assert table.methods[0].tolist() == [CROWN, CROWN]


def test_alpha_optimisation_never_loosens():
    inst = random_instance(7)
    prior = ibp(inst.model, inst.lower, inst.upper)
    plain = crown_bounds(inst.model, inst.lower, inst.upper, prior, AlphaConfig(optimize=False))
    tuned = crown_bounds(inst.model, inst.lower, inst.upper, prior, AlphaConfig(steps=20, step_size=0.1))
    for k in range(prior.n_layers):
        assert np.all(tuned.lower[k] >= plain.lower[k] - 1e-12)
        assert np.all(tuned.upper[k] <= plain.upper[k] + 1e-12)


def test_bounds_file_roundtrip(tmp_path):
    inst = random_instance(2)
    table = tighten_all(inst.model, inst.lower, inst.upper, CROWN)
    path = tmp_path / "bounds.json"
    save_bounds(table, CROWN, path)
    back, method = load_bounds(path)
    assert method == CROWN
    for k in range(table.n_layers):
        np.testing.assert_array_equal(back.lower[k], table.lower[k])
        np.testing.assert_array_equal(back.upper[k], table.upper[k])
        assert back.methods[k].tolist() == table.methods[k].tolist()
    again = tmp_path / "again.json"
    save_bounds(back, CROWN, again)
    assert again.read_bytes() == path.read_bytes()
