"""Distributed solution of one SCA subproblem by ADMM over simulated message passing.

Each node ``n`` owns its variables and keeps local copies of
``(t_{j->n}, P_j, lam_j)`` for every in-neighbor ``j`` and of ``nu_m`` for
every ``m`` that can collide on its links. Consensus between originals and
copies is enforced with multipliers ``q`` (3-vectors) and ``v`` (scalars).

All values a node uses from other nodes arrive through :class:`ControlMessage`
objects on a :class:`MessageBus`; nodes never read each other's state.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .convex import ConvexProgram, Objective, SolveReport, solve
from .model import RoutingModel, compile_rows, neg
from .convex import LINEAR

log = logging.getLogger(__name__)

KINDS = ("primal-copy", "silence-copy", "forwarded-silence", "multiplier-q", "multiplier-v")
_PAYLOAD = {"primal-copy": 3, "silence-copy": 1, "forwarded-silence": 1, "multiplier-q": 3, "multiplier-v": 1}


class ConnectivityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ControlMessage:
    sender: int
    receiver: int
    round: int
    kind: str
    subject: tuple          # what the values describe, e.g. ("link", j, n) or ("nu", m)
    values: tuple
    via: int | None = None  # relay node for forwarded silences

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if len(self.values) != _PAYLOAD[self.kind]:
            raise ValueError(f"{self.kind} carries {_PAYLOAD[self.kind]} values, got {len(self.values)}")

    def to_record(self) -> dict:
        return {"sender": self.sender, "receiver": self.receiver, "round": self.round, "kind": self.kind,
                "subject": list(self.subject), "values": [float(v) for v in self.values], "via": self.via}


class MessageBus:
    """Reliable in-order delivery; every message is delivered exactly once."""

    def __init__(self, drop=None):
        self.queue: deque[ControlMessage] = deque()
        self.log: list[ControlMessage] = []
        self.drop = drop  # test hook: callable(msg) -> bool

    def send(self, msg: ControlMessage):
        self.log.append(msg)
        if self.drop is not None and self.drop(msg):
            return
        self.queue.append(msg)

    def deliver(self, agents: dict):
        while self.queue:
            msg = self.queue.popleft()
            agents[msg.receiver].receive(msg)

    def dump(self, path):
        with open(path, "w") as fh:
            for m in self.log:
                fh.write(json.dumps(m.to_record()) + "\n")


@dataclass
class LocalCopies:
    """Copies held by one node."""
    node: int
    links: dict[int, np.ndarray] = field(default_factory=dict)    # j -> (t_jn, P_j, lam_j)
    silences: dict[int, float] = field(default_factory=dict)      # m -> nu_m


@dataclass
class MultiplierState:
    q: dict[tuple[int, int], np.ndarray]    # (j, n) -> 3-vector
    v: dict[tuple[int, int], float]         # (m, n) -> scalar
    c: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if not (math.isfinite(self.c) and self.c > 0 and math.isfinite(self.beta) and self.beta > 0):
            raise ValueError("penalty c and step beta must be finite and positive")


def link_vector(model: RoutingModel, x, j, n):
    get = model.getter(x)
    return np.array([get(("t", j, n)), get(("P", j)), get(("lam", j))])


def copy_sets(model: RoutingModel) -> dict[int, tuple[list[int], list[int]]]:
    """For each node: (senders whose link variables it copies, nodes whose silence it copies)."""
    return {n: (list(model.inn[n]), model.interference_union(n)) for n in model.nodes}


def check_connectivity(model: RoutingModel):
    """Every silence a node needs must be reachable over the neighbor graph."""
    adj = {n: set() for n in model.nodes}
    for (a, b) in model.links:
        if b in adj:
            adj[a].add(b)
            adj[b].add(a)
    for n, (_, sil) in copy_sets(model).items():
        seen, stack = {n}, [n]
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        missing = [m for m in sil if m not in seen]
        if missing:
            raise ConnectivityError(f"node {n} has no path to nodes {missing} whose silence it copies")


# ---------------------------------------------------------------------------
# local programs

def _copy_key(key, holder):
    return ("copy", holder) + key


class LocalProblem:
    """Node ``n``'s feasible set A_n and the fixed part of its objective."""

    def __init__(self, model: RoutingModel, n: int, anchor, budgets):
        self.model = model
        self.n = n
        senders, silences = copy_sets(model)[n]
        self.senders = senders
        self.silences = silences
        own = [k for k in model.keys if _owner(k) == n]
        copies = []
        for j in senders:
            copies += [("t", j, n), ("P", j), ("lam", j)]
        copies += [("nu", m) for m in silences]
        self.own = own
        self.copies = copies
        self.keys = own + [_copy_key(k, n) for k in copies]
        index = {k: i for i, k in enumerate(own)}
        for i, k in enumerate(copies):
            index[k] = len(own) + i
        self.index = index
        get = model.getter(anchor)
        rows = [r.linearized(get) for r in model.node_rows(n, budgets)]
        for r in rows:
            for k in r.keys():
                if k not in index:
                    raise KeyError(f"row {r.name} at node {n} needs {k}, which is neither owned nor copied")
        self.families = compile_rows(rows, index, len(self.keys))
        self.lower = np.array([model.key_bounds(k)[0] for k in own + copies])
        self.upper = np.array([model.key_bounds(k)[1] for k in own + copies])

    def program(self, lin, quad) -> ConvexProgram:
        cfg = self.model.config
        terms = []
        r = self.index[("rho", self.n)]
        lin = lin.copy()
        if cfg.utility is LINEAR:
            lin[r] -= 1.0
        else:
            terms.append((r, neg(cfg.utility)))
        if cfg.cost is not None:
            terms.append((self.index[("P", self.n)], cfg.cost))
        return ConvexProgram([repr(k) for k in self.keys], Objective(lin, quad, terms),
                             self.families, self.lower.copy(), self.upper.copy())


def _owner(key):
    return key[2] if key[0] == "yc" else key[1]


# ---------------------------------------------------------------------------
# agents

class NodeAgent:
    def __init__(self, problem: LocalProblem, x0, mult: MultiplierState, bus: MessageBus):
        self.p = problem
        self.n = problem.n
        self.bus = bus
        model = problem.model
        self.model = model
        self.c = mult.c
        self.beta = mult.beta
        # local vector (own then copies), initialized from the anchor
        get = model.getter(x0)
        self.z = np.array([get(k) for k in problem.own + problem.copies])
        self.interior = self.z.copy()
        # what this node knows about others
        self.orig_links = {j: self._copy_link(j) for j in problem.senders}        # x_{j->n}
        self.orig_nu = {m: self.z[problem.index[("nu", m)]] for m in problem.silences}
        self.held_links = {i: self._own_link(i) for i in model.out[self.n]}     # x_{n->i,i}
        self.holders_nu = [m for m in model.nodes if self.n in copy_sets(model)[m][1]]
        self.held_nu = {m: self.z[problem.index[("nu", self.n)]] for m in self.holders_nu}
        self.q_out = {i: np.zeros(3) for i in model.out[self.n] if i in model.inn}   # q_{n,i}
        self.q_in = {j: np.zeros(3) for j in problem.senders}                         # q_{j,n}
        self.v_out = {m: 0.0 for m in self.holders_nu}                                # v_{n,m}
        self.v_in = {m: 0.0 for m in problem.silences}                                # v_{m,n}
        self.failed_rounds: list[int] = []
        self.last = None   # (program, multipliers) of the latest local solve

    # -- helpers ------------------------------------------------------------
    def _own_link(self, i):
        ix = self.p.index
        return np.array([self.z[ix[("t", self.n, i)]], self.z[ix[("P", self.n)]], self.z[ix[("lam", self.n)]]])

    def _copy_link(self, j):
        ix = self.p.index
        return np.array([self.z[ix[("t", j, self.n)]], self.z[ix[("P", j)]], self.z[ix[("lam", j)]]])

    def copies(self) -> LocalCopies:
        ix = self.p.index
        return LocalCopies(self.n, {j: self._copy_link(j) for j in self.p.senders},
                           {m: float(self.z[ix[("nu", m)]]) for m in self.p.silences})

    # -- local objective ------------------------------------------------------
    def objective_terms(self):
        """Linear and diagonal-quadratic parts of the local augmented Lagrangian."""
        ix = self.p.index
        nz = len(self.z)
        lin = np.zeros(nz)
        quad = np.zeros(nz)
        const = 0.0
        c = self.c
        n = self.n
        for i, held in self.held_links.items():
            if i not in self.model.inn:   # the sink keeps no copies
                continue
            q = self.q_out[i]
            for k, key in enumerate((("t", n, i), ("P", n), ("lam", n))):
                a = ix[key]
                lin[a] += q[k] - c * held[k]
                quad[a] += c
                const += 0.5 * c * held[k] ** 2
        for j, orig in self.orig_links.items():
            q = self.q_in[j]
            for k, key in enumerate((("t", j, n), ("P", j), ("lam", j))):
                a = ix[key]
                lin[a] += -q[k] - c * orig[k]
                quad[a] += c
                const += 0.5 * c * orig[k] ** 2
        a = ix[("nu", n)]
        for m, held in self.held_nu.items():
            lin[a] += self.v_out[m] - c * held
            quad[a] += c
            const += 0.5 * c * held ** 2
        for m, orig in self.orig_nu.items():
            a = ix[("nu", m)]
            lin[a] += -self.v_in[m] - c * orig
            quad[a] += c
            const += 0.5 * c * orig ** 2
        return lin, quad, const

    def local_value(self, z=None):
        z = self.z if z is None else z
        lin, quad, const = self.objective_terms()
        prog = self.p.program(lin, quad)
        return prog.objective.value(z) + const

    def primal_update(self, rnd, tol=1e-9) -> SolveReport:
        lin, quad, _ = self.objective_terms()
        prog = self.p.program(lin, quad)
        before = prog.objective.value(self.z)
        m = prog.n_rows + int(np.sum(np.isfinite(prog.lower))) + int(np.sum(np.isfinite(prog.upper)))
        # the stored interior point sits near the central path at m/t ~ 1e-3
        rep = solve(prog, self.interior, tol=tol, t0=m / 1e-2)
        if rep.status == "infeasible" or not np.all(np.isfinite(rep.x)) or prog.max_violation(rep.x) > 0:
            self.failed_rounds.append(rnd)
            log.warning("node %d: local solve failed in round %d (%s)", self.n, rnd, rep.status)
            return rep
        if prog.objective.value(rep.x) <= before + 1e-9 * max(1.0, abs(before)):
            self.z = rep.x
        else:
            self.failed_rounds.append(rnd)
        if rep.interior is not None:
            self.interior = rep.interior
        if rep.multipliers:
            self.last = (prog, rep.multipliers)
        return rep

    # -- messaging ------------------------------------------------------------
    def send_primal(self, rnd):
        n = self.n
        for i in self.model.out[n]:
            if i in self.model.inn:
                self.bus.send(ControlMessage(n, i, rnd, "primal-copy", ("link", n, i), tuple(self._own_link(i))))
        for j in self.p.senders:
            self.bus.send(ControlMessage(n, j, rnd, "primal-copy", ("copy", j, n), tuple(self._copy_link(j))))
        nu = float(self.z[self.p.index[("nu", n)]])
        for m in self.holders_nu:
            relay = route_for(self.model, n, m)
            if relay is None:
                self.bus.send(ControlMessage(n, m, rnd, "silence-copy", ("nu", n), (nu,)))
            else:
                self.bus.send(ControlMessage(relay, m, rnd, "forwarded-silence", ("nu", n), (nu,), via=relay))
        for m in self.p.silences:
            val = float(self.z[self.p.index[("nu", m)]])
            relay = route_for(self.model, n, m)
            if relay is None:
                self.bus.send(ControlMessage(n, m, rnd, "silence-copy", ("nucopy", m, n), (val,)))
            else:
                self.bus.send(ControlMessage(relay, m, rnd, "forwarded-silence", ("nucopy", m, n), (val,), via=relay))

    def dual_update(self, rnd):
        """Update the multipliers this node holds as copy holder and report them."""
        n = self.n
        for j in self.p.senders:
            self.q_in[j] = self.q_in[j] + self.beta * (self.orig_links[j] - self._copy_link(j))
            self.bus.send(ControlMessage(n, j, rnd, "multiplier-q", ("q", j, n), tuple(self.q_in[j])))
        for m in self.p.silences:
            self.v_in[m] = self.v_in[m] + self.beta * (self.orig_nu[m] - float(self.z[self.p.index[("nu", m)]]))
            relay = route_for(self.model, n, m)
            self.bus.send(ControlMessage(n, m, rnd, "multiplier-v", ("v", m, n), (self.v_in[m],),
                                         via=relay))

    def receive(self, msg: ControlMessage):
        subj = msg.subject
        if msg.kind == "primal-copy" and subj[0] == "link":
            self.orig_links[subj[1]] = np.array(msg.values)
        elif msg.kind == "primal-copy" and subj[0] == "copy":
            self.held_links[subj[2]] = np.array(msg.values)
        elif msg.kind in ("silence-copy", "forwarded-silence") and subj[0] == "nu":
            self.orig_nu[subj[1]] = msg.values[0]
        elif msg.kind in ("silence-copy", "forwarded-silence") and subj[0] == "nucopy":
            self.held_nu[subj[2]] = msg.values[0]
        elif msg.kind == "multiplier-q":
            self.q_out[subj[2]] = np.array(msg.values)
        elif msg.kind == "multiplier-v":
            self.v_out[subj[2]] = msg.values[0]


def route_for(model: RoutingModel, a: int, b: int):
    """``None`` if a and b are one-hop neighbors, else a common neighbor used as relay."""
    def nb(u):
        return set(model.out.get(u, ())) | set(model.inn.get(u, ()))
    if b in nb(a):
        return None
    common = sorted((nb(a) & nb(b)) - {model.sink})
    if common:
        return common[0]
    common = sorted(nb(a) & nb(b))
    return common[0] if common else a


def expected_messages(model: RoutingModel, n: int) -> dict[str, int]:
    """Messages originated on behalf of node ``n`` in one round."""
    senders, silences = copy_sets(model)[n]
    holders = [m for m in model.nodes if n in copy_sets(model)[m][1]]
    direct = sum(route_for(model, n, m) is None for m in holders) + sum(route_for(model, n, m) is None for m in silences)
    total_sil = len(holders) + len(silences)
    return {
        "primal-copy": sum(i in model.inn for i in model.out[n]) + len(senders),
        "silence-copy": direct,
        "forwarded-silence": total_sil - direct,
        "multiplier-q": len(senders),
        "multiplier-v": len(silences),
    }


# ---------------------------------------------------------------------------
# driver

@dataclass
class ADMMResult:
    x: np.ndarray               # originals assembled into a global vector
    rounds: int
    converged: bool
    gap_trace: list[dict]       # per round: round, per-pair routing gaps, max residual
    objective: float
    messages: list[ControlMessage]
    failed: dict[int, list[int]]
    agents: dict


def consensus_gaps(agents: dict, model: RoutingModel):
    """(routing-probability gaps per pair, max |original - copy| over all pairs)."""
    route = {}
    worst = 0.0
    for n, ag in agents.items():
        for j in ag.p.senders:
            orig = agents[j]._own_link(n)
            cp = ag._copy_link(j)
            route[(j, n)] = abs(math.exp(orig[0]) - math.exp(cp[0]))
            worst = max(worst, float(np.max(np.abs(orig - cp))))
        for m in ag.p.silences:
            orig = agents[m].z[agents[m].p.index[("nu", m)]]
            worst = max(worst, abs(float(orig - ag.z[ag.p.index[("nu", m)]])))
    return route, worst


def augmented_lagrangian(agents: dict) -> float:
    """Global augmented Lagrangian; each coupling term counted once (at the holder)."""
    total = 0.0
    for n, ag in agents.items():
        lin, quad, _ = ag.objective_terms()
        z = ag.z
        total += -z[ag.p.index[("rho", n)]] if ag.model.config.utility is LINEAR else \
            -float(ag.model.config.utility.f(z[ag.p.index[("rho", n)]]))
        if ag.model.config.cost is not None:
            total += float(ag.model.config.cost.f(z[ag.p.index[("P", n)]]))
        c = ag.c
        for j in ag.p.senders:
            orig = agents[j]._own_link(n)
            d = orig - ag._copy_link(j)
            total += float(ag.q_in[j] @ d) + 0.5 * c * float(d @ d)
        for m in ag.p.silences:
            d = float(agents[m].z[agents[m].p.index[("nu", m)]] - ag.z[ag.p.index[("nu", m)]])
            total += ag.v_in[m] * d + 0.5 * c * d * d
    return total


def assemble(model: RoutingModel, agents: dict, base) -> np.ndarray:
    x = np.array(base, dtype=float).copy()
    for n, ag in agents.items():
        for k in ag.p.own:
            x[model.index[k]] = ag.z[ag.p.index[k]]
    return x


def run_admm(model: RoutingModel, anchor, budgets, beta: float = 0.1, c: float = 1.0,
             max_rounds: int = 100, gap_tol: float = 1e-3, order: str = "gauss-seidel",
             bus: MessageBus | None = None, callback=None, local_tol: float = 1e-9,
             on_update=None) -> ADMMResult:
    """Solve the budgeted surrogate at ``anchor`` with one agent per node.

    ``order`` is ``"gauss-seidel"`` (ascending node id, each node sees the
    values already updated in the round) or ``"jacobi"`` (all nodes use
    the previous round's values). ``callback(round, agents)`` runs after
    each round and ``on_update(round, n, agents)`` after each Gauss-Seidel
    primal update.
    """
    if order not in ("gauss-seidel", "jacobi"):
        raise ValueError(f"unknown sweep order {order!r}")
    check_connectivity(model)
    mult = MultiplierState({}, {}, c=c, beta=beta)
    bus = bus or MessageBus()
    agents = {n: NodeAgent(LocalProblem(model, n, anchor, budgets), anchor, mult, bus) for n in model.nodes}
    trace = []
    converged = False
    rnd = 0
    for rnd in range(1, max_rounds + 1):
        if order == "gauss-seidel":
            for n in model.nodes:
                agents[n].primal_update(rnd, tol=local_tol)
                agents[n].send_primal(rnd)
                bus.deliver(agents)
                if on_update is not None:
                    on_update(rnd, n, agents)
        else:
            for n in model.nodes:
                agents[n].primal_update(rnd, tol=local_tol)
            for n in model.nodes:
                agents[n].send_primal(rnd)
            bus.deliver(agents)
        for n in model.nodes:
            agents[n].dual_update(rnd)
        bus.deliver(agents)
        route, worst = consensus_gaps(agents, model)
        rec = {"round": rnd, "max_route_gap": max(route.values(), default=0.0), "max_residual": worst,
               "pairs": route, "lagrangian": augmented_lagrangian(agents)}
        trace.append(rec)
        if callback is not None:
            callback(rnd, agents)
        log.debug("ADMM round %d: route gap %.3e residual %.3e", rnd, rec["max_route_gap"], worst)
        if worst < gap_tol:
            converged = True
            break
    x = assemble(model, agents, anchor)
    return ADMMResult(x, rnd, converged, trace, model.utility(x), bus.log,
                      {n: a.failed_rounds for n, a in agents.items() if a.failed_rounds}, agents)


def repair(model: RoutingModel, x, budgets=None):
    """Make an ADMM iterate feasible for the exact problem.

    Residual disagreement between originals and copies can leave flow and
    y-check rows slightly violated; y-check is raised to the implied margin
    and rates are trimmed by the remaining flow violation.
    """
    x = np.array(x, dtype=float).copy()
    idx = model.index
    for (j, n) in model.links:
        key = ("yc", j, n)
        if key not in idx:
            continue
        ls = model.ls[(j, n)]
        need = (max(ls.margin(x[idx[("P", j)]]), 0.0) / ls.sigma) ** 2 if ls.sigma > 0 else 0.0
        x[idx[key]] = min(max(x[idx[key]], need * (1 + 1e-12) + 1e-15), model.upper[idx[key]])
    vals = model.true_values(x, budgets)
    for n in model.nodes:
        v = vals[f"flow[{n}]"]
        if v > -1e-13:
            r = idx[("rho", n)]
            x[r] = max(0.0, x[r] - v - 1e-12)
    return x
