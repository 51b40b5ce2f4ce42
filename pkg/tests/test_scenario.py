import dataclasses
import math

import networkx as nx
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from statroute.scenario import ScenarioError, build_topology, load_scenario, save_scenario

from conftest import make_scenario, scenario_path


def test_reference_scenario_values(test1_scenario):
    s = test1_scenario
    assert s.n_nodes == 7
    assert s.sink_id == 8
    assert s.pathloss_exponent == 3.5
    assert s.shadow_std_db == 6.0
    assert s.nakagami_m == 1.0
    assert s.p_max_dbw == 0.0
    assert s.noise_power_w == 1e-8
    assert s.sinr_threshold_db == -10.0
    assert len(s.protected_points) == 7
    # -80 dBW interference cap
    assert all(math.isclose(10 * math.log10(p.cap_w), -80.0) for p in s.protected_points)


def test_test2_only_differs_in_activity(test1_scenario, test2_scenario):
    assert test1_scenario.network_hash() == test2_scenario.network_hash()
    assert test1_scenario.content_hash() != test2_scenario.content_hash()
    assert [p.active for p in test2_scenario.pu_transmitters] == [True, False]
    # only the points of active PUs are protected
    assert {p.pu for p in test2_scenario.protected_points} == {1}


def _write(tmp_path, data, name="s.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data, sort_keys=False))
    return p


def test_duplicate_node_id_rejected(tmp_path):
    data = make_scenario([(0, 0), (50, 0)], (100, 0)).to_dict()
    data["nodes"][1]["id"] = 1
    with pytest.raises(ScenarioError) as err:
        load_scenario(_write(tmp_path, data))
    assert err.value.field == "nodes"
    assert err.value.line is not None


def test_minimal_scenario(tmp_path):
    p = tmp_path / "one.yaml"
    save_scenario(make_scenario([(0, 0)], (100, 0)), p)
    s = load_scenario(p)
    assert s.n_nodes == 1 and s.sink_id == 2


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("nodes:\n  - {id: 1, x: 0, y: 0\nsink: {id: 2}\n")
    with pytest.raises(ScenarioError) as err:
        load_scenario(p)
    assert err.value.line is not None


@pytest.mark.parametrize("field,value", [("pathloss_exponent", 2.0), ("shadow_std_db", -1.0), ("nakagami_m", 0.4)])
def test_propagation_invariants(tmp_path, field, value):
    data = make_scenario([(0, 0)], (100, 0)).to_dict()
    data["propagation"][field] = value
    with pytest.raises(ScenarioError) as err:
        load_scenario(_write(tmp_path, data))
    assert err.value.field == field


def test_zero_distance_rejected(tmp_path):
    data = make_scenario([(0, 0), (10, 0)], (100, 0)).to_dict()
    data["nodes"][1]["x"] = 0.0
    with pytest.raises(ScenarioError, match="zero distance"):
        load_scenario(_write(tmp_path, data))


def test_nonpositive_cap_rejected(tmp_path):
    data = make_scenario([(0, 0)], (100, 0), [(-50, 0, 1e-8)]).to_dict()
    data["pu_points"][0]["cap_w"] = 0.0
    with pytest.raises(ScenarioError, match="cap"):
        load_scenario(_write(tmp_path, data))


def test_topology_matches_bfs(test1_scenario):
    topo = build_topology(test1_scenario)
    g = nx.DiGraph()
    g.add_edges_from(topo.links)
    sink = test1_scenario.sink_id
    for n in test1_scenario.node_ids:
        assert topo.out_neighbors[n], n
        assert nx.has_path(g, n, sink)
    assert topo.reaches_sink() == {n: True for n in test1_scenario.node_ids}


def test_one_node_topology():
    topo = build_topology(make_scenario([(0, 0)], (100, 0)))
    assert topo.out_neighbors[1] == (2,)
    assert topo.interference[(1, 2)] == frozenset()


def test_far_apart_nodes_do_not_contend():
    s = make_scenario([(-500, 0), (500, 0)], (0, 0))
    topo = build_topology(s)
    assert 2 not in topo.out_neighbors[1] and 1 not in topo.out_neighbors[2]
    # both reach the sink, so each is a potential collider at the sink for the other
    assert topo.interference[(1, 3)] == frozenset({2})
    assert topo.interference[(2, 3)] == frozenset({1})


coords = st.floats(min_value=-400, max_value=400, allow_nan=False).map(lambda v: round(v, 1))


@st.composite
def layouts(draw):
    n = draw(st.integers(min_value=1, max_value=6))
    pts = draw(st.lists(st.tuples(coords, coords), min_size=n + 1, max_size=n + 1,
                        unique_by=lambda p: p))
    return pts[:-1], pts[-1]


@settings(max_examples=40, deadline=None)
@given(layouts())
def test_topology_invariants(layout):
    nodes, sink = layout
    s = make_scenario(nodes, sink)
    topo = build_topology(s)
    assert topo == build_topology(s)
    sid = s.sink_id
    assert topo.out_neighbors[sid] == ()
    for n, outs in topo.out_neighbors.items():
        assert n not in outs
        for j in outs:
            assert n in topo.in_neighbors[j]
            assert math.isfinite(s.pathloss_db(s.distance(n, j)))
    for (n, i), members in topo.interference.items():
        assert n not in members and i not in members


@settings(max_examples=30, deadline=None)
@given(layouts(), st.floats(min_value=2.1, max_value=5.0), st.floats(min_value=0.0, max_value=12.0))
def test_save_load_round_trip(tmp_path_factory, layout, eta, shadow):
    nodes, sink = layout
    s = make_scenario(nodes, sink, [(-450.0, 450.0, 1e-8)], pu=(-450.0, -450.0))
    s = dataclasses.replace(s, pathloss_exponent=eta, shadow_std_db=shadow)
    p = tmp_path_factory.mktemp("rt") / "s.yaml"
    save_scenario(s, p)
    assert load_scenario(p) == s


def test_packaged_and_repo_copies_agree():
    from pathlib import Path
    repo = Path(__file__).resolve().parents[1] / "scenarios"
    for name in ("two_pu_test1.yaml", "two_pu_test2.yaml"):
        assert load_scenario(repo / name) == load_scenario(scenario_path(name))
