from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest

from statroute import admm, budget
from statroute.admm import (ConnectivityError, ControlMessage, LocalProblem, MessageBus, MultiplierState,
                            NodeAgent, check_connectivity, copy_sets, expected_messages, run_admm)
from statroute.convex import solve
from statroute.sca import find_feasible_start

from conftest import make_model, make_scenario


def _setup(model):
    x0 = find_feasible_start(model)
    b = budget.initial_allocation(model, x0).as_budgets()
    return x0, b


@pytest.fixture(scope="module")
def line_model():
    return make_model(make_scenario([(0.0, 0.0), (150.0, 0.0), (300.0, 0.0)], (450.0, 0.0),
                                    [(150.0, 60.0, 1e-8)]))


def test_message_validation():
    with pytest.raises(ValueError):
        ControlMessage(1, 2, 1, "primal-copy", ("link", 1, 2), (1.0, 2.0))
    with pytest.raises(ValueError):
        ControlMessage(1, 2, 1, "gossip", ("x",), (1.0,))
    with pytest.raises(ValueError):
        MultiplierState({}, {}, c=0.0)
    with pytest.raises(ValueError):
        MultiplierState({}, {}, beta=float("inf"))


def test_copy_sets_match_topology(test1_model):
    m = test1_model
    for n, (senders, silences) in copy_sets(m).items():
        assert senders == m.inn[n]
        expect = set()
        for i in m.out[n]:
            expect |= set(m.interf[(n, i)])
        for j in m.inn[n]:
            expect |= set(m.interf[(j, n)])
        assert silences == sorted(expect)


def _origin(msg):
    if msg.kind == "forwarded-silence":
        return msg.subject[1] if msg.subject[0] == "nu" else msg.subject[2]
    return msg.sender


def test_messages_per_round_match_send_list(test1_model):
    m = test1_model
    x0, b = _setup(m)
    bus = MessageBus()
    res = run_admm(m, x0, b, max_rounds=2, gap_tol=0.0, bus=bus)
    assert res.rounds == 2
    for rnd in (1, 2):
        got = Counter((_origin(msg), msg.kind) for msg in bus.log if msg.round == rnd)
        for n in m.nodes:
            for kind, count in expected_messages(m, n).items():
                assert got[(n, kind)] == count, (rnd, n, kind)
        assert sum(got.values()) == sum(sum(expected_messages(m, n).values()) for n in m.nodes)


def test_message_log_round_trip(tmp_path, chain_model):
    x0, b = _setup(chain_model)
    res = run_admm(chain_model, x0, b, max_rounds=1, gap_tol=0.0)
    bus = MessageBus()
    bus.log = res.messages
    bus.dump(tmp_path / "m.ndjson")
    lines = (tmp_path / "m.ndjson").read_text().splitlines()
    assert len(lines) == len(res.messages) > 0


def _agent(model, n, c=1.0, beta=0.1):
    x0, b = _setup(model)
    return NodeAgent(LocalProblem(model, n, x0, b), x0, MultiplierState({}, {}, c=c, beta=beta), MessageBus())


def test_dual_update_equal_copies_unchanged(chain_model):
    ag = _agent(chain_model, 2)
    before = {j: q.copy() for j, q in ag.q_in.items()}
    ag.dual_update(1)
    for j, q in ag.q_in.items():
        np.testing.assert_array_equal(q, before[j])


def test_dual_update_linear_rule(chain_model):
    ag = _agent(chain_model, 2, beta=0.1)
    eps = np.array([0.3, -0.2, 0.05])
    ag.orig_links[1] = ag._copy_link(1) + eps
    ag.dual_update(1)
    np.testing.assert_allclose(ag.q_in[1], 0.1 * eps)
    sent = [msg for msg in ag.bus.log if msg.kind == "multiplier-q"]
    assert len(sent) == 1 and sent[0].receiver == 1


def test_single_node_one_round(one_node_model):
    x0, b = _setup(one_node_model)
    res = run_admm(one_node_model, x0, b, max_rounds=10)
    assert res.converged and res.rounds == 1
    cen = solve(one_node_model.surrogate(x0, b), x0)
    assert abs(res.objective + cen.objective) < 1e-6


def test_chain_fixed_point_matches_centralized(chain_model):
    x0, b = _setup(chain_model)
    cen = solve(chain_model.surrogate(x0, b), x0)
    res = run_admm(chain_model, x0, b, beta=0.1, c=1.0, max_rounds=60, gap_tol=1e-7)
    assert res.gap_trace[-1]["max_residual"] < 1e-4
    assert abs(res.objective + cen.objective) < 1e-4


def test_line_objective_matches_centralized(line_model):
    # the objective is O(1e-3) here, so the penalty has to be small for the
    # multipliers to matter within a modest number of rounds
    x0, b = _setup(line_model)
    cen = solve(line_model.surrogate(x0, b), x0)
    res = run_admm(line_model, x0, b, beta=0.1, c=0.1, max_rounds=100, gap_tol=1e-7)
    x = admm.repair(line_model, res.x, b)
    assert line_model.max_violation(x, b) <= 1e-9
    assert abs(line_model.utility(x) + cen.objective) < 1e-3


def test_lagrangian_nonincreasing_within_sweep(line_model):
    x0, b = _setup(line_model)
    seen = []

    def hook(rnd, n, agents):
        seen.append((rnd, admm.augmented_lagrangian(agents)))

    run_admm(line_model, x0, b, max_rounds=8, gap_tol=0.0, on_update=hook)
    for (r0, a), (r1, b_) in zip(seen, seen[1:]):
        if r0 == r1:
            assert b_ <= a + 1e-9 * max(1.0, abs(a))


def test_iterates_stay_locally_feasible(line_model):
    x0, b = _setup(line_model)
    worst = []

    def check(rnd, agents):
        for ag in agents.values():
            prog = ag.p.program(*ag.objective_terms()[:2])
            worst.append(prog.max_violation(ag.z))

    run_admm(line_model, x0, b, max_rounds=5, gap_tol=0.0, callback=check)
    assert max(worst) <= 0.0
    # per-node budgets hold for every node's own values at every round
    res = run_admm(line_model, x0, b, max_rounds=3, gap_tol=0.0)
    used = line_model.node_interference(res.x)
    caps = {pt.id: pt.cap_eff for pt in line_model.points}
    for (r, n), frac in b.items():
        assert used[(r, n)] <= frac * caps[r] * (1 + 1e-9)


def test_zero_multiplier_large_penalty_stays_near_start(chain_model):
    x0, b = _setup(chain_model)
    res = run_admm(chain_model, x0, b, c=1e4, max_rounds=1, gap_tol=0.0)
    # copies equal originals at the start, so a huge penalty pins the shared values
    gaps = res.gap_trace[0]["max_residual"]
    assert gaps < 1e-3


def test_jacobi_order_runs(chain_model):
    x0, b = _setup(chain_model)
    res = run_admm(chain_model, x0, b, max_rounds=5, gap_tol=0.0, order="jacobi")
    assert res.rounds == 5
    with pytest.raises(ValueError):
        run_admm(chain_model, x0, b, order="random")


def test_connectivity_error():
    fake = SimpleNamespace(nodes=[1, 2, 3], links=[(1, 4), (2, 4), (3, 4)], inn={1: [], 2: [], 3: []},
                           out={1: [4], 2: [4], 3: [4]}, interference_union=lambda n: [3] if n == 1 else [])
    with pytest.raises(ConnectivityError):
        check_connectivity(fake)
