import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statroute.delivery import (InconsistentInputs, NetworkParams, availability, build_delivery_matrix,
                                check_deliverability, limit_distribution, params_from_solution, queue_drift,
                                queues_stable, simulate_network, tagged_walk)
from statroute.sca import solve_centralized

SINK = 0


def test_single_node_matrix():
    p = 0.7
    M = build_delivery_matrix([1, SINK], {(1, SINK): 1.0}, {(1, SINK): p})
    np.testing.assert_allclose(M.D, [[1 - p, 0.0], [p, 1.0]])


def test_zero_availability_freezes_packets():
    t = {(1, 2): 0.5, (1, SINK): 0.5, (2, SINK): 1.0}
    r = {lk: 0.9 for lk in t}
    M = build_delivery_matrix([1, 2, SINK], t, r, {lk: 0.0 for lk in t})
    np.testing.assert_allclose(M.D, np.eye(3))


@st.composite
def dag_inputs(draw):
    n = draw(st.integers(1, 6))
    order = list(range(1, n + 1)) + [SINK]
    t, r, chi = {}, {}, {}
    for a in range(1, n + 1):
        heads = [b for b in range(a + 1, n + 1)] + [SINK]
        w = np.array(draw(st.lists(st.floats(0, 1), min_size=len(heads), max_size=len(heads))))
        scale = draw(st.floats(0, 1))
        w = w / w.sum() * scale if w.sum() > 0 else w
        for b, wv in zip(heads, w):
            t[(a, b)] = float(min(wv, 1.0))
            r[(a, b)] = draw(st.floats(0, 1))
            chi[(a, b)] = draw(st.floats(0, 1))
    return order, t, r, chi


@settings(max_examples=100, deadline=None)
@given(dag_inputs())
def test_columns_are_stochastic(inp):
    order, t, r, chi = inp
    M = build_delivery_matrix(order, t, r, chi)
    np.testing.assert_allclose(M.column_sums(), 1.0, atol=1e-12)
    assert np.all(M.D >= 0)
    assert M.D[-1, -1] == 1.0 and np.all(M.D[:-1, -1] == 0)


def test_inconsistent_inputs():
    with pytest.raises(InconsistentInputs):
        build_delivery_matrix([1, SINK], {(1, SINK): 1.2}, {(1, SINK): 0.5})
    with pytest.raises(InconsistentInputs):
        build_delivery_matrix([1, 2, SINK], {(1, 2): 0.7, (1, SINK): 0.6}, {(1, 2): 1, (1, SINK): 1})
    with pytest.raises(InconsistentInputs):
        build_delivery_matrix([1, SINK], {(1, SINK): 0.5}, {(1, SINK): 1.5})


def test_deliverability_chain():
    v = check_deliverability([1, 2, SINK], [(1, 2), (2, SINK)])
    assert v.deliverable and v.t_star == 2 and not v.stuck


def test_deliverability_blocked_sink_link():
    # node 2 is the only way out and its sink link is never available
    links = [(1, 2), (2, 1), (2, SINK)]
    v = check_deliverability([1, 2, SINK], links, {(2, SINK): 0.0})
    assert not v.deliverable and v.t_star is None
    assert set(v.stuck) == {1, 2} and len(v.recommendations) == 2


def test_limit_distribution_geometric():
    p = 0.3
    M = build_delivery_matrix([1, SINK], {(1, SINK): 1.0}, {(1, SINK): p})
    lim = limit_distribution(M, 0, tol=1e-3)
    # sink mass after k steps is 1 - (1-p)^k
    k = int(np.ceil(np.log(1e-3) / np.log(1 - p)))
    assert lim.converged and lim.steps == k
    np.testing.assert_allclose(lim.sink_mass, 1 - (1 - p) ** np.arange(k + 1))


def test_limit_distribution_time_varying():
    mats = [np.eye(2), np.array([[0.0, 0.0], [1.0, 1.0]])]
    lim = limit_distribution(lambda k: mats[min(k, 1)], 0)
    assert lim.converged and lim.steps == 2


def _toy_params(chi=None):
    order = [1, 2, SINK]
    t = {(1, 2): 0.6, (1, SINK): 0.4, (2, SINK): 1.0}
    success = {(1, 2): 0.9, (1, SINK): 0.5, (2, SINK): 0.8}
    interf = {(1, 2): [], (1, SINK): [2], (2, SINK): [1]}
    return NetworkParams(order, {1: 0.4, 2: 0.5}, {1: 0.05, 2: 0.05}, t, success, interf,
                         chi or {lk: 1.0 for lk in t})


def test_tagged_walk_matches_limit():
    params = _toy_params()
    n, horizon = 20000, 30
    mc = tagged_walk(params, 1, n, horizon, seed=5)
    lim = limit_distribution(params.matrix(), 0, tol=0, t_max=horizon)
    mass = np.array(lim.sink_mass)
    se = np.sqrt(np.maximum(mass * (1 - mass), 1e-12) / n)
    assert np.all(np.abs(mc.sink_mass - mass) <= 3 * se + 1e-12)


def test_simulation_deterministic_and_delivers():
    params = _toy_params()
    a = simulate_network(params, 5000, seed=11, arrivals=False, tagged={1: 200})
    b = simulate_network(params, 5000, seed=11, arrivals=False, tagged={1: 200})
    assert a.delivered == b.delivered == 200
    np.testing.assert_array_equal(a.delays, b.delays)


def test_simulation_blocked_link_never_delivers():
    params = _toy_params({(1, 2): 1.0, (1, SINK): 0.0, (2, SINK): 0.0})
    res = simulate_network(params, 2000, seed=1, arrivals=False, tagged={1: 50})
    assert res.delivered == 0


def test_queue_drift_recovers_slope():
    window = 100
    t = (np.arange(50) + 0.5) * window
    trace = np.column_stack([2e-3 * t + 1.0, np.full(50, 3.0)])
    np.testing.assert_allclose(queue_drift(trace, window), [2e-3, 0.0], atol=1e-12)
    stable, _ = queues_stable(trace, window)
    assert not stable


def _loads(p):
    load = {}
    for n in p.order[:-1]:
        serve = sum(p.mu[n] * tv * p.reliability(lk) * p.chi[lk] for lk, tv in p.t.items() if lk[0] == n)
        inflow = sum(p.mu[lk[0]] * tv * p.reliability(lk) * p.chi[lk] for lk, tv in p.t.items() if lk[1] == n)
        load[n] = (p.rho[n] + inflow) / serve if serve > 0 else 0.0
    return load


def test_solution_queues_stable(chain_model):
    from dataclasses import replace
    sol = solve_centralized(chain_model)
    params = params_from_solution(chain_model, sol.x)
    # the optimum keeps every node below saturation
    assert max(_loads(params).values()) < 1.0
    # with some slack the queues settle; past saturation the detector fires
    light = replace(params, rho={n: 0.8 * v for n, v in params.rho.items()})
    stable, slope = queues_stable(simulate_network(light, 40000, seed=3).queue_trace)
    assert stable, slope
    heavy = replace(params, rho={n: 1.3 * v for n, v in params.rho.items()})
    stable, _ = queues_stable(simulate_network(heavy, 40000, seed=3).queue_trace)
    assert not stable


def test_availability_range(test1_scenario):
    from statroute.scenario import build_topology
    chi = availability(test1_scenario, build_topology(test1_scenario).links)
    assert chi and all(0.0 <= v <= 1.0 for v in chi.values())
