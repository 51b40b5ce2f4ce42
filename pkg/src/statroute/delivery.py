"""Packet deliverability: delivery matrices, absorbing-chain limits and Monte Carlo.

Node order in every matrix is the CR nodes in ascending id followed by the
sink, so the sink occupies the last row and column. ``D[i, n]`` is the
probability that a packet held by node ``n`` is at node ``i`` one step later.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import channel
from .scenario import Scenario


class InconsistentInputs(ValueError):
    pass


@dataclass
class DeliveryMatrix:
    D: np.ndarray
    order: list[int]            # node id of each row/column; sink last

    @property
    def sink_index(self) -> int:
        return len(self.order) - 1

    def column_sums(self) -> np.ndarray:
        return self.D.sum(axis=0)


def build_delivery_matrix(order, t: dict, r: dict, chi: dict | None = None) -> DeliveryMatrix:
    """``D[i, n] = t_{n->i} r_{n->i} chi_{n->i}``, diagonal takes the remainder.

    ``order`` lists the CR node ids followed by the sink id.
    """
    order = list(order)
    pos = {nd: k for k, nd in enumerate(order)}
    size = len(order)
    D = np.zeros((size, size))
    out_sum: dict[int, float] = {}
    for (n, i), tv in t.items():
        if not 0 <= tv <= 1:
            raise InconsistentInputs(f"routing probability of {n}->{i} is {tv}")
        rv = r.get((n, i), 0.0)
        cv = 1.0 if chi is None else chi.get((n, i), 1.0)
        if not (0 <= rv <= 1 and 0 <= cv <= 1):
            raise InconsistentInputs(f"reliability/availability of {n}->{i} outside [0, 1]")
        out_sum[n] = out_sum.get(n, 0.0) + tv
        D[pos[i], pos[n]] += tv * rv * cv
    for n, s in out_sum.items():
        if s > 1 + 1e-12:
            raise InconsistentInputs(f"routing probabilities of node {n} sum to {s}")
    sink = size - 1
    D[:, sink] = 0.0
    for k in range(size):
        rest = 1.0 - (D[:, k].sum() - D[k, k])
        if rest < -1e-12:
            raise InconsistentInputs(f"node {order[k]} moves more than all of its mass")
        D[k, k] = max(rest, 0.0)
    D[sink, sink] = 1.0
    return DeliveryMatrix(D, order)


@dataclass
class Verdict:
    deliverable: bool
    t_star: int | None
    stuck: list[int] = field(default_factory=list)          # nodes without a chi-positive path
    recommendations: list[str] = field(default_factory=list)


def check_deliverability(order, links, chi: dict | None = None) -> Verdict:
    """Whether every packet eventually reaches the sink w.p. 1, and the
    smallest horizon ``t*`` after which every node has positive sink mass."""
    order = list(order)
    sink = order[-1]
    chi = chi or {}
    avail = [(n, i) for (n, i) in links if chi.get((n, i), 1.0) > 0]
    out_pos = {n: any(a == n for a, _ in avail) for n in order[:-1]}
    into_sink = any(i == sink for _, i in avail)
    # average-graph matrix: uniform routing over available links
    t = {}
    for n in order[:-1]:
        nb = [i for (a, i) in avail if a == n]
        for i in nb:
            t[(n, i)] = 1.0 / len(nb)
    M = build_delivery_matrix(order, t, {lk: 1.0 for lk in t}, None).D
    reach = np.zeros(len(order), dtype=bool)
    reach[-1] = True
    changed = True
    while changed:
        changed = False
        for (n, i) in avail:
            if reach[order.index(i)] and not reach[order.index(n)]:
                reach[order.index(n)] = True
                changed = True
    stuck = [order[k] for k in range(len(order) - 1) if not reach[k]]
    recs = []
    for n in stuck:
        into = sorted({j for (j, i) in links if i == n})
        if into:
            recs.append(f"node {n} cannot reach the sink: set " + ", ".join(f"t_{j}->{n} = 0" for j in into))
        else:
            recs.append(f"node {n} cannot reach the sink and has no in-neighbors: drop its traffic")
    ok = not stuck and into_sink and all(out_pos.values())
    if not ok:
        return Verdict(False, None, stuck or [n for n, v in out_pos.items() if not v], recs)
    P = np.eye(len(order))
    for step in range(1, len(order) + 1):
        P = M @ P
        if np.all(P[-1, :-1] > 0):
            return Verdict(True, step, [], [])
    return Verdict(False, None, stuck, recs)   # unreachable for a connected graph


@dataclass
class LimitResult:
    theta: np.ndarray
    steps: int
    converged: bool
    sink_mass: list[float]


def limit_distribution(D, start, tol: float = 1e-3, t_max: int = 100000) -> LimitResult:
    """Iterate ``theta <- D(t) theta`` until the sink holds all but ``tol``.

    ``D`` is a DeliveryMatrix, an array, or a callable ``step -> array``;
    ``start`` is a node index or an initial distribution.
    """
    get = D if callable(D) else (lambda _k, M=(D.D if isinstance(D, DeliveryMatrix) else np.asarray(D)): M)
    M0 = get(0)
    size = M0.shape[0]
    if np.ndim(start) == 0:
        theta = np.zeros(size)
        theta[int(start)] = 1.0
    else:
        theta = np.asarray(start, dtype=float).copy()
    target = np.zeros(size)
    target[-1] = 1.0
    trace = [float(theta[-1])]
    for k in range(t_max):
        if np.max(np.abs(theta - target)) < tol:
            return LimitResult(theta, k, True, trace)
        theta = get(k) @ theta
        trace.append(float(theta[-1]))
    return LimitResult(theta, t_max, bool(np.max(np.abs(theta - target)) < tol), trace)


# ---------------------------------------------------------------------------
# link availability

def availability(s: Scenario, links) -> dict[tuple[int, int], float]:
    """Per-link probability that no active PU blocks the receiver.

    A PU transmitter blocks reception at nodes within its blocking radius
    whenever it is on (probability ``duty_cycle`` per slot, independently).
    """
    chi = {}
    for (n, i) in links:
        p = 1.0
        for pu in s.active_pus:
            if pu.blocking_radius_m > 0 and s.pu_distance(pu, i) <= pu.blocking_radius_m:
                p *= 1.0 - pu.duty_cycle
        chi[(n, i)] = p
    return chi


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass
class NetworkParams:
    """Everything the simulator needs from a solution."""
    order: list[int]                          # CR ids then sink
    mu: dict[int, float]
    rho: dict[int, float]
    t: dict[tuple[int, int], float]
    success: dict[tuple[int, int], float]     # SINR-only decoding probability
    interf: dict[tuple[int, int], list[int]]
    chi: dict[tuple[int, int], float]

    @property
    def sink(self) -> int:
        return self.order[-1]

    def reliability(self, lk) -> float:
        """Independence-model reliability (collision-free product times SINR success)."""
        return self.success[lk] * float(np.prod([1.0 - self.mu[m] for m in self.interf[lk]]))

    def matrix(self) -> DeliveryMatrix:
        return build_delivery_matrix(self.order, self.t, {lk: self.reliability(lk) for lk in self.t}, self.chi)


def params_from_solution(model, x, chi=None) -> NetworkParams:
    mu = model.transmit_prob(x)
    p = model.powers(x)
    success = {lk: channel.link_reliability(p[lk[0]], model.ls[lk]) for lk in model.links}
    chi = chi if chi is not None else availability(model.scenario, model.links)
    return NetworkParams(list(model.nodes) + [model.sink], mu, model.rates(x), model.routing(x), success,
                         {lk: list(model.interf[lk]) for lk in model.links}, chi)


@dataclass
class MCResult:
    model: str
    packets: int
    delivered: int
    delays: np.ndarray
    queue_trace: np.ndarray | None = None   # (samples, nodes) mean queue lengths per window
    slots: int = 0
    sink_mass: np.ndarray | None = None     # tagged walk: fraction delivered by step

    @property
    def fraction(self) -> float:
        return self.delivered / self.packets if self.packets else 0.0

    @property
    def stderr(self) -> float:
        f = self.fraction
        return math.sqrt(max(f * (1 - f), 1e-300) / self.packets) if self.packets else 0.0


def tagged_walk(params: NetworkParams, origin: int, n_packets: int, horizon: int, seed: int) -> MCResult:
    """Independent tagged packets following the delivery matrix transitions.

    Each step a packet at node n moves to i w.p. ``t r chi`` (the
    independence collision model) and stays otherwise.
    """
    rng = np.random.default_rng(seed)
    M = params.matrix()
    D = M.D
    size = D.shape[0]
    cum = np.cumsum(D, axis=0)   # column n: CDF of the next position
    pos = np.full(n_packets, M.order.index(origin))
    arrived = np.full(n_packets, -1)
    sink = size - 1
    mass = np.zeros(horizon + 1)
    for step in range(1, horizon + 1):
        live = np.flatnonzero(arrived < 0)
        if live.size == 0:
            mass[step:] = 1.0
            break
        u = rng.random(live.size)
        cdf = cum[:, pos[live]]
        nxt = (u[None, :] >= cdf).sum(axis=0)
        pos[live] = np.minimum(nxt, size - 1)
        done = live[pos[live] == sink]
        arrived[done] = step
        mass[step] = np.mean(arrived >= 0)
    delays = arrived[arrived >= 0].astype(float)
    return MCResult("independent", n_packets, int(np.sum(arrived >= 0)), delays, slots=horizon, sink_mass=mass)


def simulate_network(params: NetworkParams, slots: int, seed: int, arrivals: bool = True,
                     tagged: dict[int, int] | None = None, window: int = 1000) -> MCResult:
    """Slotted simulation with queues and true simultaneous transmissions.

    Each slot every backlogged node transmits its head-of-line packet with
    probability ``mu``, choosing next hop ``i`` w.p. ``t_{n->i}`` (idle with
    the leftover probability). Reception needs the SINR draw to clear the
    threshold, the link to be available and no node of ``I_{n->i}`` to be
    transmitting in the same slot. Exogenous arrivals are Bernoulli(rho).
    ``tagged`` preloads packets (node -> count) at slot 0.
    """
    rng = np.random.default_rng(seed)
    nodes = params.order[:-1]
    sink = params.sink
    k_of = {n: k for k, n in enumerate(nodes)}
    queues = {n: deque() for n in nodes}
    for n, cnt in (tagged or {}).items():
        queues[n].extend([0] * cnt)
    hops = {n: [(i, params.t[(n, i)]) for (a, i) in params.t if a == n] for n in nodes}
    mu = np.array([params.mu[n] for n in nodes])
    rho = np.array([params.rho.get(n, 0.0) for n in nodes])
    generated = sum((tagged or {}).values())
    delivered = 0
    delays = []
    samples = []
    acc = np.zeros(len(nodes))
    for slot in range(1, slots + 1):
        if arrivals:
            new = rng.random(len(nodes)) < rho
            for k in np.flatnonzero(new):
                queues[nodes[k]].append(slot)
            generated += int(new.sum())
        backlog = np.array([len(queues[n]) > 0 for n in nodes])
        talk = backlog & (rng.random(len(nodes)) < mu)
        talking = {nodes[k] for k in np.flatnonzero(talk)}
        moves = []
        for n in sorted(talking):
            u = rng.random()
            acc_p = 0.0
            dest = None
            for i, p in hops[n]:
                acc_p += p
                if u < acc_p:
                    dest = i
                    break
            if dest is None:
                continue
            lk = (n, dest)
            ok = (rng.random() < params.success[lk]
                  and rng.random() < params.chi.get(lk, 1.0)
                  and not any(m in talking for m in params.interf[lk]))
            if ok:
                moves.append((n, dest))
        for n, dest in moves:
            birth = queues[n].popleft()
            if dest == sink:
                delivered += 1
                delays.append(slot - birth)
            else:
                queues[dest].append(birth)
        acc += [len(queues[n]) for n in nodes]
        if slot % window == 0:
            samples.append(acc / window)
            acc = np.zeros(len(nodes))
    return MCResult("exact", generated, delivered, np.array(delays, dtype=float),
                    np.array(samples) if samples else np.zeros((0, len(nodes))), slots)


def queue_drift(trace: np.ndarray, window: int = 1000) -> np.ndarray:
    """Least-squares slope (packets per slot) of each node's windowed mean queue."""
    if trace.shape[0] < 3:
        return np.zeros(trace.shape[1])
    t = (np.arange(trace.shape[0]) + 0.5) * window
    tc = t - t.mean()
    return (tc @ (trace - trace.mean(axis=0))) / float(tc @ tc)


def queues_stable(trace: np.ndarray, window: int = 1000, tol: float = 1e-4) -> tuple[bool, np.ndarray]:
    """No node shows positive drift: slope below ``tol`` packets per slot.

    A backlog building at rate ``tol`` would add 10 packets over 1e5 slots.
    """
    slope = queue_drift(trace, window)
    return bool(np.all(slope < tol)), slope
