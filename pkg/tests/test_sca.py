import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statroute.sca import (InfeasibleStart, find_feasible_start, from_node_vars, sca_iterate, solve_centralized,
                           to_node_vars)

from conftest import make_model, make_scenario
from oracles import chain_grid_oracle


def _rand_point(model, rng):
    lo, hi = model.lower.copy(), model.upper.copy()
    lo = np.maximum(lo, -20)
    return lo + rng.random(lo.size) * (hi - lo)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_surrogate_majorizes_and_touches(test1_model, seed):
    m = test1_model
    rng = np.random.default_rng(seed)
    anchor, other = _rand_point(m, rng), _rand_point(m, rng)
    ga, go = m.getter(anchor), m.getter(other)
    for row in m.rows():
        lin = row.linearized(ga)
        assert math.isclose(lin.value(ga), row.value(ga), rel_tol=1e-9, abs_tol=1e-9)
        assert lin.value(go) >= row.value(go) - 1e-9 * max(1.0, abs(row.value(go)))
        # gradients agree at the anchor (central differences)
        for k in list(row.keys())[:4]:
            h = 1e-6
            xp, xm = anchor.copy(), anchor.copy()
            xp[m.index[k]] += h
            xm[m.index[k]] -= h
            d_row = (row.value(m.getter(xp)) - row.value(m.getter(xm))) / (2 * h)
            d_lin = (lin.value(m.getter(xp)) - lin.value(m.getter(xm))) / (2 * h)
            assert math.isclose(d_row, d_lin, rel_tol=1e-4, abs_tol=1e-6)


def test_feasible_start(test1_model):
    x0 = find_feasible_start(test1_model)
    assert test1_model.max_violation(x0) <= 0
    assert test1_model.pu_margin_db(x0) >= 0


def test_node_vars_round_trip(test1_model):
    x0 = find_feasible_start(test1_model)
    np.testing.assert_array_equal(from_node_vars(test1_model, to_node_vars(test1_model, x0)), x0)


def test_sca_trace_feasible_and_monotone(test1_sca):
    res = test1_sca
    assert res.status == "converged"
    objs = [r.objective for r in res.trace]
    assert all(b >= a - 1e-9 for a, b in zip(objs, objs[1:]))
    assert all(r.max_violation <= 1e-9 for r in res.trace)
    assert res.trace[-1].kkt <= 1e-5


def test_sca_rejects_infeasible_start(chain_model):
    bad = find_feasible_start(chain_model)
    bad[chain_model.index[("rho", 2)]] = 1.0
    with pytest.raises(ValueError):
        sca_iterate(chain_model, bad)


def test_one_node_matches_grid(one_node_model):
    res = solve_centralized(one_node_model)
    assert abs(res.objective - chain_grid_oracle(one_node_model)) < 1e-3


def test_chain_matches_grid(chain_model):
    res = solve_centralized(chain_model)
    assert abs(res.objective - chain_grid_oracle(chain_model)) < 1e-3


def test_no_pu_constraint_gives_full_access():
    m = make_model(make_scenario([(0.0, 0.0)], (120.0, 0.0)))
    res = solve_centralized(m)
    mu = m.transmit_prob(res.x)[1]
    assert mu > 0.99
    assert m.powers(res.x)[1] == pytest.approx(m.pmax[1], abs=1e-6)


def test_unreachable_cap_reports_binding_point():
    # a protected point a few metres from the only node: even the weakest
    # operating point exceeds the cap
    s = make_scenario([(0.0, 0.0)], (120.0, 0.0), [(1.0, 0.0, 1e-14)])
    with pytest.raises(InfeasibleStart) as err:
        find_feasible_start(make_model(s))
    assert err.value.binding is not None
