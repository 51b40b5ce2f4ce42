import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from statroute import budget
from statroute.budget import (BudgetAllocation, FullConfig, HeadNodeError, NegativeMultiplier, budget_floors,
                              head_nodes, initial_allocation, project_capped_simplex, project_with_floor, run_full,
                              subgradient_step)
from statroute.sca import find_feasible_start


def test_projection_examples():
    np.testing.assert_allclose(project_capped_simplex([0.6, 0.6], 1.0), [0.5, 0.5])
    np.testing.assert_allclose(project_capped_simplex([2.0, 0.0], 1.0), [1.0, 0.0])
    np.testing.assert_allclose(project_capped_simplex([0.2, -0.3], 1.0), [0.2, 0.0])
    with pytest.raises(ValueError):
        project_capped_simplex([1.0], 0.0)


vecs = arrays(np.float64, st.integers(1, 12), elements=st.floats(-3, 3, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vecs, st.floats(0.05, 4.0), st.integers(0, 2**31))
def test_projection_is_nearest_point(v, cap, seed):
    x = project_capped_simplex(v, cap)
    assert np.all(x >= 0) and x.sum() <= cap + 1e-12
    # obtuse-angle condition against random feasible points
    rng = np.random.default_rng(seed)
    for _ in range(20):
        y = rng.random(v.size)
        y *= cap * rng.random() / max(y.sum(), 1e-12)
        assert (v - x) @ (y - x) <= 1e-10


@settings(max_examples=100, deadline=None)
@given(vecs, st.integers(0, 2**31))
def test_projection_with_floor(v, seed):
    rng = np.random.default_rng(seed)
    floor = rng.random(v.size) * 0.5 / v.size
    x = project_with_floor(v, floor)
    assert np.all(x >= floor - 1e-15) and x.sum() <= 1 + 1e-12
    # idempotent
    np.testing.assert_allclose(project_with_floor(x, floor), x, atol=1e-12)


def test_floor_exhausting_cap_rejected():
    with pytest.raises(ValueError):
        project_with_floor([0.1, 0.1], [0.6, 0.6])


def _alloc():
    return BudgetAllocation({1: {1: 0.3, 2: 0.3}}, {1: {1: 0.01, 2: 0.01}}, {1: 1})


def test_subgradient_step_moves_toward_larger_multiplier():
    new = subgradient_step(_alloc(), {(1, 1): 0.2, (1, 2): 0.0}, 0.1)
    assert new.fractions[1][1] > 0.3 and math.isclose(new.fractions[1][2], 0.3)
    norm = subgradient_step(_alloc(), {(1, 1): 0.2, (1, 2): 0.0}, 0.1, normalize=True)
    assert math.isclose(norm.fractions[1][1], 0.4)
    full = subgradient_step(_alloc(), {(1, 1): 5.0, (1, 2): 5.0}, 1.0)
    assert math.isclose(sum(full.fractions[1].values()), 1.0)


def test_negative_multiplier_rejected():
    with pytest.raises(NegativeMultiplier):
        subgradient_step(_alloc(), {(1, 1): -0.1}, 0.1)


def test_allocation_helpers(test1_model):
    x0 = find_feasible_start(test1_model)
    alloc = initial_allocation(test1_model, x0)
    floors = budget_floors(test1_model)
    used = test1_model.node_interference(x0)
    for pt in test1_model.points:
        fr = alloc.fractions[pt.id]
        assert sum(fr.values()) == pytest.approx(1.0)
        for n, f in fr.items():
            assert f >= floors[pt.id][n]
            assert f * pt.cap_eff >= used[(pt.id, n)] * (1 - 1e-12)
    assert alloc.max_change(alloc.copy()) == 0.0
    assert test1_model.max_violation(x0, alloc.as_budgets()) <= 1e-9


def test_head_nodes_lowest_id(test1_model):
    heads = head_nodes(test1_model)
    for pt in test1_model.points:
        assert heads[pt.id] == min(pt.members)


def test_head_node_unreachable():
    pt = SimpleNamespace(id=1, members=(1, 2))
    fake = SimpleNamespace(nodes=[1, 2], links=[(1, 3), (2, 3)], points=[pt])
    with pytest.raises(HeadNodeError):
        head_nodes(fake)


def test_full_run_small_chain_is_safe(chain_model):
    res = run_full(chain_model, FullConfig(max_iters=6))
    assert res.status in ("converged", "max-iter")
    for rec in res.safety_trace:
        assert rec["realized_w"] <= rec["cap_w"] * (1 + 1e-9)
    assert res.objectives[res.best_ell - 1] == max(res.objectives)
    # with budgets the result can only be as good as the centralized optimum
    from statroute.sca import solve_centralized
    assert max(res.objectives) <= solve_centralized(chain_model).objective + 1e-6


def test_apriori_allocation_is_fixed(chain_model):
    res = run_full(chain_model, FullConfig(max_iters=4, apriori=True))
    first = res.allocations[0]
    assert all(a.max_change(first) == 0.0 for a in res.allocations)
