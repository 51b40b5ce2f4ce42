"""Network description: CR nodes, sink, PU geometry and propagation parameters.

Scenario files are YAML. Powers are in dBW, distances in meters and
interference caps in watts; see ``docs/scenario_format.md`` for the schema.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

from .units import KAPPA


class ScenarioError(ValueError):
    """Raised for unparsable scenario files or violated scenario invariants."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = ""
        if field is not None:
            where += f" [field {field}]"
        if line is not None:
            where += f" [line {line}]"
        super().__init__(message + where)


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float
    noise_power_w: float | None = None
    p_max_dbw: float | None = None


@dataclass(frozen=True)
class PUTransmitter:
    id: int
    x: float
    y: float
    power_dbw: float
    active: bool = True
    # per-slot activity probability and the radius within which an active
    # transmitter blocks CR reception (feeds link availability chi)
    duty_cycle: float = 1.0
    blocking_radius_m: float = 0.0


@dataclass(frozen=True)
class PUPoint:
    id: int
    pu: int
    x: float
    y: float
    cap_w: float


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[Node, ...]
    sink: Node
    pu_transmitters: tuple[PUTransmitter, ...] = ()
    pu_points: tuple[PUPoint, ...] = ()
    pathloss_exponent: float = 3.5
    shadow_std_db: float = 6.0
    nakagami_m: float = 1.0
    noise_power_w: float = 1e-8
    p_max_dbw: float = 0.0
    sinr_threshold_db: float = -10.0
    epsilon_stability: float = 1e-3
    cr_only_mode: bool = False
    link_thresholds_db: tuple[tuple[int, int, float], ...] = ()
    name: str = "scenario"

    # -- convenience accessors -------------------------------------------
    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def sink_id(self) -> int:
        return self.sink.id

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(nd.id for nd in self.nodes)

    def node(self, node_id: int) -> Node:
        if node_id == self.sink.id:
            return self.sink
        return self.nodes[node_id - 1]

    def noise(self, node_id: int) -> float:
        nd = self.node(node_id)
        return self.noise_power_w if nd.noise_power_w is None else nd.noise_power_w

    def p_max(self, node_id: int) -> float:
        nd = self.node(node_id)
        return self.p_max_dbw if nd.p_max_dbw is None else nd.p_max_dbw

    def threshold(self, n: int, i: int) -> float:
        for a, b, v in self.link_thresholds_db:
            if a == n and b == i:
                return v
        return self.sinr_threshold_db

    @property
    def active_pus(self) -> tuple[PUTransmitter, ...]:
        if self.cr_only_mode:
            return ()
        return tuple(p for p in self.pu_transmitters if p.active)

    @property
    def protected_points(self) -> tuple[PUPoint, ...]:
        """Protection points whose PU system is currently active."""
        active = {p.id for p in self.active_pus}
        return tuple(pt for pt in self.pu_points if pt.pu in active)

    # -- derived geometry --------------------------------------------------
    @cached_property
    def positions(self) -> np.ndarray:
        """(N+1, 2) array; row k holds node k+1 (last row is the sink)."""
        pts = [(nd.x, nd.y) for nd in self.nodes] + [(self.sink.x, self.sink.y)]
        return np.array(pts, dtype=float)

    @cached_property
    def distances(self) -> np.ndarray:
        d = self.positions[:, None, :] - self.positions[None, :, :]
        return np.hypot(d[..., 0], d[..., 1])

    def distance(self, a: int, b: int) -> float:
        return float(self.distances[a - 1, b - 1])

    def pu_distance(self, pu: PUTransmitter, node_id: int) -> float:
        nd = self.node(node_id)
        return math.hypot(pu.x - nd.x, pu.y - nd.y)

    def point_distance(self, pt: PUPoint, node_id: int) -> float:
        nd = self.node(node_id)
        return math.hypot(pt.x - nd.x, pt.y - nd.y)

    def pathloss_db(self, d: float) -> float:
        """Mean deterministic path gain in dB for distance ``d`` (negative)."""
        return -10.0 * self.pathloss_exponent * math.log10(d)

    # -- validation --------------------------------------------------------
    def validate(self) -> "Scenario":
        if len(self.nodes) < 1:
            raise ScenarioError("scenario needs N >= 1 CR nodes", field="nodes")
        ids = [nd.id for nd in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ScenarioError(f"duplicate node id(s) {dup}", field="nodes")
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ScenarioError("node ids must be contiguous 1..N", field="nodes")
        if list(ids) != sorted(ids):
            raise ScenarioError("nodes must be listed in id order", field="nodes")
        if self.sink.id != len(ids) + 1:
            raise ScenarioError(f"sink id must be N+1 = {len(ids) + 1}", field="sink.id")
        if not self.pathloss_exponent > 2:
            raise ScenarioError("path-loss exponent must exceed 2", field="pathloss_exponent")
        if not self.shadow_std_db >= 0:
            raise ScenarioError("shadowing std must be >= 0", field="shadow_std_db")
        if not self.nakagami_m >= 0.5:
            raise ScenarioError("Nakagami m must be >= 0.5", field="nakagami_m")
        if not 0 < self.epsilon_stability < 1:
            raise ScenarioError("stability epsilon must lie in (0, 1)", field="epsilon_stability")
        powers = [self.p_max_dbw, self.sinr_threshold_db]
        powers += [nd.p_max_dbw for nd in self.nodes if nd.p_max_dbw is not None]
        powers += [p.power_dbw for p in self.pu_transmitters]
        powers += [v for _, _, v in self.link_thresholds_db]
        if not all(math.isfinite(v) for v in powers):
            raise ScenarioError("all powers and thresholds must be finite", field="powers")
        noises = [self.noise_power_w] + [nd.noise_power_w for nd in self.nodes if nd.noise_power_w is not None]
        if not all(math.isfinite(v) and v > 0 for v in noises):
            raise ScenarioError("noise power must be positive and finite", field="noise_power_w")
        pu_ids = [p.id for p in self.pu_transmitters]
        if len(set(pu_ids)) != len(pu_ids):
            raise ScenarioError("duplicate PU transmitter id", field="pu_transmitters")
        for pu in self.pu_transmitters:
            if not 0 <= pu.duty_cycle <= 1:
                raise ScenarioError("duty cycle must lie in [0, 1]", field=f"pu_transmitters[{pu.id}].duty_cycle")
        pt_ids = [p.id for p in self.pu_points]
        if len(set(pt_ids)) != len(pt_ids):
            raise ScenarioError("duplicate PU point id", field="pu_points")
        for pt in self.pu_points:
            if not (math.isfinite(pt.cap_w) and pt.cap_w > 0):
                raise ScenarioError("interference cap must be positive", field=f"pu_points[{pt.id}].cap_w")
            if pt.pu not in pu_ids:
                raise ScenarioError(f"PU point {pt.id} refers to unknown PU {pt.pu}", field=f"pu_points[{pt.id}].pu")
        if not self.cr_only_mode and not self.pu_transmitters and self.pu_points:
            raise ScenarioError("PU points given without PU transmitters", field="pu_points")
        d = self.distances + np.eye(len(self.positions))
        if np.any(d <= 0):
            raise ScenarioError("two nodes share a position (zero distance)", field="nodes")
        for nd in self.nodes + (self.sink,):
            for pu in self.pu_transmitters:
                if self.pu_distance(pu, nd.id) <= 0:
                    raise ScenarioError(f"node {nd.id} sits on PU {pu.id}", field="pu_transmitters")
            for pt in self.pu_points:
                if self.point_distance(pt, nd.id) <= 0:
                    raise ScenarioError(f"node {nd.id} sits on PU point {pt.id}", field="pu_points")
        return self

    # -- variants ----------------------------------------------------------
    def with_pu_active(self, pu_id: int, active: bool) -> "Scenario":
        pus = tuple(dataclasses.replace(p, active=active) if p.id == pu_id else p
                    for p in self.pu_transmitters)
        return dataclasses.replace(self, pu_transmitters=pus)

    def to_dict(self) -> dict:
        def node_rec(nd):
            rec = {"id": nd.id, "x": nd.x, "y": nd.y}
            if nd.noise_power_w is not None:
                rec["noise_power_w"] = nd.noise_power_w
            if nd.p_max_dbw is not None:
                rec["p_max_dbw"] = nd.p_max_dbw
            return rec

        return {
            "name": self.name,
            "propagation": {
                "pathloss_exponent": self.pathloss_exponent,
                "shadow_std_db": self.shadow_std_db,
                "nakagami_m": self.nakagami_m,
            },
            "radio": {
                "noise_power_w": self.noise_power_w,
                "p_max_dbw": self.p_max_dbw,
                "sinr_threshold_db": self.sinr_threshold_db,
                "epsilon_stability": self.epsilon_stability,
            },
            "cr_only_mode": self.cr_only_mode,
            "nodes": [node_rec(nd) for nd in self.nodes],
            "sink": node_rec(self.sink),
            "pu_transmitters": [dataclasses.asdict(p) for p in self.pu_transmitters],
            "pu_points": [dataclasses.asdict(p) for p in self.pu_points],
            "link_thresholds_db": [[a, b, v] for a, b, v in self.link_thresholds_db],
        }

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def network_hash(self) -> str:
        """Hash of everything except PU activity flags and the name.

        Two runs of the same network under different PU activity share it.
        """
        d = self.to_dict()
        d.pop("name")
        for p in d["pu_transmitters"]:
            p.pop("active")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# file I/O

_RADIO_KEYS = ("noise_power_w", "p_max_dbw", "sinr_threshold_db", "epsilon_stability")
_PROP_KEYS = ("pathloss_exponent", "shadow_std_db", "nakagami_m")


def _line_of(root, path):
    """Best-effort 1-based line of ``path`` inside a composed YAML tree."""
    node = root
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    return node.start_mark.line + 1 if node is not None else None


def _node_from(rec, where, root):
    try:
        return Node(
            id=int(rec["id"]), x=float(rec["x"]), y=float(rec["y"]),
            noise_power_w=None if rec.get("noise_power_w") is None else float(rec["noise_power_w"]),
            p_max_dbw=None if rec.get("p_max_dbw") is None else float(rec["p_max_dbw"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad node record: {exc!r}", field=".".join(map(str, where)),
                            line=_line_of(root, where)) from None


def scenario_from_dict(data: Mapping, root=None) -> Scenario:
    if not isinstance(data, Mapping):
        raise ScenarioError("top level must be a mapping")
    try:
        nodes = tuple(_node_from(rec, ("nodes", k), root) for k, rec in enumerate(data["nodes"]))
        sink = _node_from(data["sink"], ("sink",), root)
    except KeyError as exc:
        raise ScenarioError(f"missing section {exc}", field=str(exc.args[0])) from None
    pus, pts = [], []
    for k, rec in enumerate(data.get("pu_transmitters") or []):
        try:
            pus.append(PUTransmitter(
                id=int(rec["id"]), x=float(rec["x"]), y=float(rec["y"]),
                power_dbw=float(rec["power_dbw"]), active=bool(rec.get("active", True)),
                duty_cycle=float(rec.get("duty_cycle", 1.0)),
                blocking_radius_m=float(rec.get("blocking_radius_m", 0.0))))
        except (KeyError, TypeError, ValueError) as exc:
            where = ("pu_transmitters", k)
            raise ScenarioError(f"bad PU record: {exc!r}", field=f"pu_transmitters[{k}]",
                                line=_line_of(root, where)) from None
    for k, rec in enumerate(data.get("pu_points") or []):
        try:
            pts.append(PUPoint(id=int(rec["id"]), pu=int(rec["pu"]), x=float(rec["x"]),
                               y=float(rec["y"]), cap_w=float(rec["cap_w"])))
        except (KeyError, TypeError, ValueError) as exc:
            where = ("pu_points", k)
            raise ScenarioError(f"bad PU point record: {exc!r}", field=f"pu_points[{k}]",
                                line=_line_of(root, where)) from None
    kwargs = {}
    for section, keys in (("propagation", _PROP_KEYS), ("radio", _RADIO_KEYS)):
        sec = data.get(section) or {}
        for key in keys:
            if key in sec:
                try:
                    kwargs[key] = float(sec[key])
                except (TypeError, ValueError):
                    raise ScenarioError(f"{section}.{key} must be numeric", field=f"{section}.{key}",
                                        line=_line_of(root, (section, key))) from None
    thresholds = tuple((int(a), int(b), float(v)) for a, b, v in (data.get("link_thresholds_db") or []))
    return Scenario(
        nodes=nodes, sink=sink, pu_transmitters=tuple(pus), pu_points=tuple(pts),
        cr_only_mode=bool(data.get("cr_only_mode", False)),
        link_thresholds_db=thresholds, name=str(data.get("name", "scenario")), **kwargs,
    )


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file."""
    text = Path(path).read_text()
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError(f"cannot parse {path}: {getattr(exc, 'problem', exc)}",
                            line=None if mark is None else mark.line + 1) from None
    scenario = scenario_from_dict(data, root)
    try:
        return scenario.validate()
    except ScenarioError as exc:
        if exc.line is None and exc.field is not None:
            head = exc.field.split(".")[0].split("[")[0]
            line = _line_of(root, (head,))
            raise ScenarioError(str(exc).split(" [field")[0], field=exc.field, line=line) from None
        raise


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario.to_dict(), sort_keys=False))


# ---------------------------------------------------------------------------
# topology

@dataclass(frozen=True)
class Topology:
    """Neighbor, interference and PU-neighborhood sets of a scenario."""

    n_nodes: int
    out_neighbors: dict[int, tuple[int, ...]]
    in_neighbors: dict[int, tuple[int, ...]]
    interference: dict[tuple[int, int], frozenset[int]]
    pu_neighborhoods: dict[int, tuple[int, ...]]
    warnings: tuple[str, ...] = field(default=())

    @property
    def sink_id(self) -> int:
        return self.n_nodes + 1

    @property
    def links(self) -> list[tuple[int, int]]:
        return [(n, i) for n in range(1, self.n_nodes + 1) for i in self.out_neighbors[n]]

    def interference_union(self, n: int) -> frozenset[int]:
        acc = set()
        for i in self.out_neighbors[n]:
            acc |= self.interference[(n, i)]
        for j in self.in_neighbors[n]:
            acc |= self.interference[(j, n)]
        return frozenset(acc)

    def reaches_sink(self) -> dict[int, bool]:
        sink = self.sink_id
        seen = {sink}
        queue = deque([sink])
        while queue:
            v = queue.popleft()
            for u in self.in_neighbors.get(v, ()):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        return {n: n in seen for n in range(1, self.n_nodes + 1)}

    def restricted(self, links) -> "Topology":
        """Same interference sets, neighbor sets limited to ``links``."""
        links = set(links)
        out = {n: tuple(i for i in self.out_neighbors[n] if (n, i) in links)
               for n in self.out_neighbors}
        inn = {i: tuple(n for n in self.in_neighbors[i] if (n, i) in links)
               for i in self.in_neighbors}
        interf = {k: v for k, v in self.interference.items() if k in links}
        return dataclasses.replace(self, out_neighbors=out, in_neighbors=inn, interference=interf)


# a CR node is part of a PU neighborhood when its worst-case mean interference
# at that point reaches this fraction of the cap
NEIGHBORHOOD_FRACTION = 1e-3
AUTO_REACH_OFFSET_DB = -10.0


def worst_case_interference(s: Scenario, pt: PUPoint, n: int) -> float:
    """Mean interference (W) at ``pt`` from node ``n`` always on at max power."""
    gain_db = s.pathloss_db(s.point_distance(pt, n))
    return float(np.exp(KAPPA * (s.p_max(n) + gain_db) + 0.5 * (KAPPA * s.shadow_std_db) ** 2))


def build_topology(s: Scenario, reach_radius="auto") -> Topology:
    """Derive neighbor sets, interference sets and PU neighborhoods.

    With ``reach_radius="auto"`` a link n->i exists iff the mean received
    SNR at max power (path loss only) is at least threshold - 10 dB.
    """
    n_nodes = s.n_nodes
    ids = list(range(1, n_nodes + 2))
    sink = s.sink_id

    def reachable(n, i):
        d = s.distance(n, i)
        if reach_radius == "auto":
            snr = s.p_max(n) + s.pathloss_db(d) - 10 * math.log10(s.noise(i))
            return snr >= s.threshold(n, i) + AUTO_REACH_OFFSET_DB
        return d <= float(reach_radius)

    out = {n: tuple(i for i in ids if i != n and reachable(n, i)) for n in range(1, n_nodes + 1)}
    out[sink] = ()
    inn = {i: tuple(n for n in range(1, n_nodes + 1) if i in out[n]) for i in ids}
    interf = {}
    for n in range(1, n_nodes + 1):
        for i in out[n]:
            interf[(n, i)] = frozenset(j for j in inn[i] if j not in (n, i))
    hoods = {}
    for pt in s.protected_points:
        hoods[pt.id] = tuple(n for n in range(1, n_nodes + 1)
                             if worst_case_interference(s, pt, n) >= NEIGHBORHOOD_FRACTION * pt.cap_w)
    topo = Topology(n_nodes=n_nodes, out_neighbors=out, in_neighbors=inn,
                    interference=interf, pu_neighborhoods=hoods)
    missing = [n for n, ok in topo.reaches_sink().items() if not ok]
    if missing:
        topo = dataclasses.replace(topo, warnings=(f"sink unreachable from nodes {missing}",))
    return topo
