import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from statroute.channel import fenton_wilkinson_link_stats
from statroute.model import RoutingModel
from statroute.scenario import build_topology, load_scenario, scenario_from_dict

DATA = resources.files("statroute") / "data"


def scenario_path(name):
    return Path(str(DATA / name))


def make_scenario(nodes, sink, points=(), pu=(-300.0, 0.0), **radio):
    d = {
        "nodes": [{"id": k + 1, "x": x, "y": y} for k, (x, y) in enumerate(nodes)],
        "sink": {"id": len(nodes) + 1, "x": sink[0], "y": sink[1]},
        "pu_transmitters": [{"id": 1, "x": pu[0], "y": pu[1], "power_dbw": 10.0}] if points else [],
        "pu_points": [{"id": k + 1, "pu": 1, "x": x, "y": y, "cap_w": c} for k, (x, y, c) in enumerate(points)],
        "radio": radio,
        "cr_only_mode": not points,
    }
    return scenario_from_dict(d).validate()


def make_model(s):
    t = build_topology(s)
    return RoutingModel(s, t, fenton_wilkinson_link_stats(s, t))


@pytest.fixture(scope="session")
def test1_scenario():
    return load_scenario(scenario_path("two_pu_test1.yaml"))


@pytest.fixture(scope="session")
def test2_scenario():
    return load_scenario(scenario_path("two_pu_test2.yaml"))


@pytest.fixture(scope="session")
def test1_model(test1_scenario):
    return make_model(test1_scenario)


@pytest.fixture(scope="session")
def test1_sca(test1_model):
    from statroute.sca import solve_centralized
    return solve_centralized(test1_model)


@pytest.fixture
def one_node_model():
    return make_model(make_scenario([(0.0, 0.0)], (120.0, 0.0), [(-60.0, 0.0, 1e-8)]))


@pytest.fixture
def chain_model():
    return make_model(make_scenario([(0.0, 0.0), (150.0, 0.0)], (300.0, 0.0), [(75.0, 40.0, 1e-8)]))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        ok, line = results[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {line}")
