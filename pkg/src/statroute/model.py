"""Variable layout, exact constraints and convex surrogates of the routing problem.

Variables are addressed by keys:

    ("P", n)        transmit power of node n (dBW)
    ("lam", n)      log of the departure rate  lambda_n = mu_n - epsilon
    ("nu", n)       log of the silence probability of node n
    ("rho", n)      exogenous rate of node n
    ("t", n, i)     log routing probability of link n->i
    ("yh", n, i)    squared normalized margin used for outgoing flow (<= x^2)
    ("yc", n, i)    squared normalized margin used for incoming flow (>= x^2)

Every constraint is a :class:`DCRow`: an affine part plus convex pieces
(positive exponentials, ``-s*sqrt``) and concave pieces (negative
exponentials, ``+s*sqrt``). The exact row keeps everything; the surrogate
replaces each concave piece by its tangent at an anchor point, which
majorizes it and matches value and gradient there.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import channel
from .channel import ChannelStats, LinkStat
from .convex import LINEAR, AffineRows, ConvexProgram, ExpRows, Objective, ScalarFn, SqrtRows
from .scenario import Scenario, Topology
from .units import KAPPA

Y_FLOOR = math.sqrt(2.0) / 2.0


@dataclass
class DCRow:
    name: str
    owner: int | None
    affine: dict = field(default_factory=dict)
    const: float = 0.0
    exp_pos: list = field(default_factory=list)    # (coef, {key: a}, b)
    exp_neg: list = field(default_factory=list)    # subtracted: -(coef * exp(a.x + b))
    sqrt_neg: list = field(default_factory=list)   # (scale, key): -scale*sqrt(x)
    sqrt_pos: list = field(default_factory=list)   # (scale, key): +scale*sqrt(x)

    def keys(self):
        ks = set(self.affine)
        for _, a, _ in self.exp_pos + self.exp_neg:
            ks |= set(a)
        ks |= {k for _, k in self.sqrt_neg + self.sqrt_pos}
        return ks

    def value(self, get) -> float:
        v = self.const + sum(c * get(k) for k, c in self.affine.items())
        for c, a, b in self.exp_pos:
            v += c * math.exp(sum(w * get(k) for k, w in a.items()) + b)
        for c, a, b in self.exp_neg:
            v -= c * math.exp(sum(w * get(k) for k, w in a.items()) + b)
        for s, k in self.sqrt_neg:
            v -= s * math.sqrt(get(k))
        for s, k in self.sqrt_pos:
            v += s * math.sqrt(get(k))
        return v

    def linearized(self, get) -> "DCRow":
        """Convex majorant built from tangents of the concave pieces at ``get``."""
        affine = dict(self.affine)
        const = self.const
        for c, a, b in self.exp_neg:
            e0 = math.exp(sum(w * get(k) for k, w in a.items()) + b)
            s0 = sum(w * get(k) for k, w in a.items()) + b
            # -c e^{s} <= c e^{s0} (s0 - s - 1)
            const += c * e0 * (s0 - b - 1.0)
            for k, w in a.items():
                affine[k] = affine.get(k, 0.0) - c * e0 * w
        for s, k in self.sqrt_pos:
            y0 = get(k)
            r0 = math.sqrt(y0)
            const += s * (r0 - y0 / (2.0 * r0))
            affine[k] = affine.get(k, 0.0) + s / (2.0 * r0)
        return DCRow(self.name, self.owner, affine, const, list(self.exp_pos), [], list(self.sqrt_neg), [])


def compile_rows(rows: list[DCRow], index: dict, n: int) -> list:
    """Turn convex DC rows into solver constraint families over ``index``."""
    exp_rows = [r for r in rows if r.exp_pos]
    sqrt_rows = [r for r in rows if not r.exp_pos and r.sqrt_neg]
    aff_rows = [r for r in rows if not r.exp_pos and not r.sqrt_neg]
    if any(r.exp_neg or r.sqrt_pos for r in rows):
        raise ValueError("compile_rows needs convex rows (linearize first)")
    fams = []

    def affine_part(rs):
        L = np.zeros((len(rs), n))
        d = np.zeros(len(rs))
        for r_i, r in enumerate(rs):
            for k, c in r.affine.items():
                L[r_i, index[k]] += c
            d[r_i] = r.const
        return L, d

    if exp_rows:
        L, d = affine_part(exp_rows)
        term_row, coef, A, b = [], [], [], []
        for r_i, r in enumerate(exp_rows):
            for c, a, bb in r.exp_pos:
                row = np.zeros(n)
                for k, w in a.items():
                    row[index[k]] += w
                term_row.append(r_i)
                coef.append(c)
                A.append(row)
                b.append(bb)
        fams.append(ExpRows(term_row, coef, np.array(A), b, L, d, [r.name for r in exp_rows], label="exp"))
    if sqrt_rows:
        if any(len(r.sqrt_neg) != 1 for r in sqrt_rows):
            raise ValueError("sqrt rows support a single sqrt term")
        L, d = affine_part(sqrt_rows)
        fams.append(SqrtRows(L, d, [index[r.sqrt_neg[0][1]] for r in sqrt_rows],
                             [r.sqrt_neg[0][0] for r in sqrt_rows], [r.name for r in sqrt_rows], label="sqrt"))
    if aff_rows:
        L, d = affine_part(aff_rows)
        fams.append(AffineRows(L, d, [r.name for r in aff_rows], label="affine"))
    return fams


def row_multipliers(program: ConvexProgram, multipliers: dict) -> dict[str, float]:
    out = {}
    for f in program.constraints:
        for name, lam in zip(f.names, multipliers[f.label]):
            out[name] = float(lam)
    return out


def neg(fn: ScalarFn) -> ScalarFn:
    return ScalarFn(lambda r: -fn.f(r), lambda r: -fn.df(r), lambda r: -fn.d2f(r))


@dataclass
class PointConstraint:
    id: int
    members: tuple[int, ...]
    log_gain: dict[int, float]   # ln E[g_{n->R}]
    cap: float                   # cap at the point (W)
    cap_eff: float               # cap minus the worst-case share of non-members


@dataclass
class ModelConfig:
    log_floor: float = -30.0
    power_range_db: float = 60.0
    y_floor: float = Y_FLOOR
    decode_headroom_db: float = 0.5
    utility: ScalarFn = LINEAR
    cost: ScalarFn | None = None


class RoutingModel:
    """The statistical routing problem for one scenario/topology/statistics triple."""

    def __init__(self, scenario: Scenario, topology: Topology, stats: ChannelStats,
                 config: ModelConfig | None = None):
        self.scenario = scenario
        self.topology = topology
        self.stats = stats
        self.config = config or ModelConfig()
        self.eps = scenario.epsilon_stability
        self.sink = scenario.sink_id
        self.pmax = {n: scenario.p_max(n) for n in scenario.node_ids}
        self._prune()
        self._build_points()
        self._layout()

    # -- structure ---------------------------------------------------------
    def decodable(self, n, i) -> bool:
        ls = self.stats.links[(n, i)]
        need = ls.threshold - ls.m + ls.sigma * math.sqrt(self.config.y_floor) * 1.02
        return self.pmax[n] - self.config.decode_headroom_db >= need

    def _prune(self):
        topo = self.topology
        usable = {lk for lk in topo.links if self.decodable(*lk)}
        self.undecodable = sorted(set(topo.links) - usable)
        # drop nodes that cannot reach the sink over usable links
        alive = {self.sink}
        changed = True
        while changed:
            changed = False
            for (n, i) in usable:
                if i in alive and n not in alive:
                    alive.add(n)
                    changed = True
        self.nodes = [n for n in self.scenario.node_ids if n in alive]
        self.excluded = [n for n in self.scenario.node_ids if n not in alive]
        self.links = sorted((n, i) for (n, i) in usable if n in alive and i in alive)
        live = set(self.nodes)
        self.out = {n: [i for (a, i) in self.links if a == n] for n in self.nodes}
        self.inn = {n: [a for (a, i) in self.links if i == n] for n in self.nodes}
        self.interf = {lk: sorted(m for m in topo.interference[lk] if m in live) for lk in self.links}
        self.ls: dict[tuple[int, int], LinkStat] = {lk: self.stats.links[lk] for lk in self.links}

    def interference_union(self, n) -> list[int]:
        acc = set()
        for i in self.out[n]:
            acc |= set(self.interf[(n, i)])
        for j in self.inn[n]:
            acc |= set(self.interf[(j, n)])
        return sorted(acc)

    def _build_points(self):
        s = self.scenario
        self.points: list[PointConstraint] = []
        live = set(self.nodes)
        for pt in s.protected_points:
            members = tuple(n for n in self.topology.pu_neighborhoods.get(pt.id, ()) if n in live)
            log_gain = {n: self.stats.pu[(n, pt.id)].log_mean_gain for n in self.nodes}
            # non-members, always on at max power, still count against the cap
            reserve = sum(math.exp(KAPPA * self.pmax[n] + log_gain[n]) for n in self.nodes if n not in members)
            self.points.append(PointConstraint(pt.id, members, log_gain, pt.cap_w, pt.cap_w - reserve))

    def _layout(self):
        keys = []
        for n in self.nodes:
            keys += [("P", n), ("lam", n), ("nu", n), ("rho", n)]
            for i in self.out[n]:
                keys += [("t", n, i), ("yh", n, i)]
            for j in self.inn[n]:
                keys.append(("yc", j, n))
        self.keys = keys
        self.index = {k: idx for idx, k in enumerate(keys)}
        self.lower = np.array([self.key_bounds(k)[0] for k in keys])
        self.upper = np.array([self.key_bounds(k)[1] for k in keys])

    def key_bounds(self, key):
        kind = key[0]
        cfg = self.config
        if kind == "P":
            pm = self.pmax[key[1]]
            return pm - cfg.power_range_db, pm
        if kind in ("lam", "nu", "t"):
            return cfg.log_floor, 0.0
        if kind == "rho":
            return 0.0, 1.0
        # squared margins: room above the largest reachable value
        ls = self.ls[key[1:]]
        x_top = max(ls.margin(self.pmax[key[1]]), 0.0) / ls.sigma if ls.sigma > 0 else 10.0
        return cfg.y_floor, 2.0 * max(cfg.y_floor, x_top**2) + 10.0

    @property
    def n_vars(self) -> int:
        return len(self.keys)

    def getter(self, x):
        idx = self.index
        return lambda k: float(x[idx[k]])

    # -- rows ----------------------------------------------------------------
    def _coll(self, lk):
        return {("nu", m): 1.0 for m in self.interf[lk]}

    def flow_row(self, n) -> DCRow:
        row = DCRow(f"flow[{n}]", n, affine={("rho", n): 1.0})
        for i in self.out[n]:
            a = {("lam", n): 1.0, ("t", n, i): 1.0, **self._coll((n, i))}
            row.exp_pos.append((1.0 / 12.0, {**a, ("yh", n, i): -0.5}, 0.0))
            row.exp_pos.append((0.25, {**a, ("yh", n, i): -2.0 / 3.0}, 0.0))
            row.exp_neg.append((1.0, a, 0.0))
        for j in self.inn[n]:
            b = {("lam", j): 1.0, ("t", j, n): 1.0, **self._coll((j, n))}
            row.exp_pos.append((1.0, b, 0.0))
            row.exp_neg.append((channel.ALPHA1, {**b, ("yc", j, n): -channel.ALPHA2}, 0.0))
        return row

    def node_rows(self, n, budgets=None) -> list[DCRow]:
        """Rows owned by node ``n``.

        ``budgets`` maps (point id, n) -> budget as a fraction of the
        point's effective cap; when given, the node carries its own
        interference rows.
        """
        rows = [self.flow_row(n)]
        rows.append(DCRow(f"route[{n}]", n, const=-1.0,
                          exp_pos=[(1.0, {("t", n, i): 1.0}, 0.0) for i in self.out[n]]))
        rows.append(DCRow(f"access[{n}]", n, const=self.eps - 1.0,
                          exp_pos=[(1.0, {("lam", n): 1.0}, 0.0), (1.0, {("nu", n): 1.0}, 0.0)]))
        for i in self.out[n]:
            ls = self.ls[(n, i)]
            rows.append(DCRow(f"yhat[{n},{i}]", n, affine={("P", n): -1.0}, const=ls.threshold - ls.m,
                              sqrt_pos=[(ls.sigma, ("yh", n, i))]))
        for j in self.inn[n]:
            ls = self.ls[(j, n)]
            rows.append(DCRow(f"ycheck[{j},{n}]", n, affine={("P", j): 1.0}, const=ls.m - ls.threshold,
                              sqrt_neg=[(ls.sigma, ("yc", j, n))]))
        if budgets is not None:
            for pt in self.points:
                if n in pt.members:
                    rows.append(self._budget_row(pt, n, budgets[(pt.id, n)]))
        return rows

    def _interference_terms(self, pt, n):
        base = pt.log_gain[n] - math.log(pt.cap_eff)
        return [(1.0, {("lam", n): 1.0, ("P", n): KAPPA}, base),
                (self.eps, {("P", n): KAPPA}, base)]

    def _budget_row(self, pt, n, frac):
        return DCRow(f"budget[{pt.id},{n}]", n, const=-frac, exp_pos=self._interference_terms(pt, n))

    def interference_rows(self) -> list[DCRow]:
        rows = []
        for pt in self.points:
            if not pt.members:
                continue
            terms = []
            for n in pt.members:
                terms += self._interference_terms(pt, n)
            rows.append(DCRow(f"pu[{pt.id}]", None, const=-1.0, exp_pos=terms))
        return rows

    def rows(self, budgets=None) -> list[DCRow]:
        rows = []
        for n in self.nodes:
            rows += self.node_rows(n, budgets)
        if budgets is None:
            rows += self.interference_rows()
        return rows

    # -- programs ------------------------------------------------------------
    def objective(self) -> Objective:
        c = np.zeros(self.n_vars)
        terms = []
        cfg = self.config
        for n in self.nodes:
            r = self.index[("rho", n)]
            if cfg.utility is LINEAR:
                c[r] -= 1.0
            else:
                terms.append((r, neg(cfg.utility)))
            if cfg.cost is not None:
                terms.append((self.index[("P", n)], cfg.cost))
        return Objective(c, None, terms)

    def utility(self, x) -> float:
        """Network utility sum U(rho) - sum C(P) at ``x``."""
        return -self.objective().value(np.asarray(x, dtype=float))

    def surrogate(self, anchor, budgets=None) -> ConvexProgram:
        get = self.getter(anchor)
        rows = [r.linearized(get) for r in self.rows(budgets)]
        return ConvexProgram([repr(k) for k in self.keys], self.objective(),
                             compile_rows(rows, self.index, self.n_vars), self.lower.copy(), self.upper.copy())

    def true_values(self, x, budgets=None) -> dict[str, float]:
        get = self.getter(x)
        return {r.name: r.value(get) for r in self.rows(budgets)}

    def max_violation(self, x, budgets=None) -> float:
        x = np.asarray(x, dtype=float)
        v = max(self.true_values(x, budgets).values())
        v = max(v, float(np.max(self.lower - x)), float(np.max(x - self.upper)))
        return v

    # -- physical quantities ------------------------------------------------
    def transmit_prob(self, x) -> dict[int, float]:
        get = self.getter(x)
        return {n: math.exp(get(("lam", n))) + self.eps for n in self.nodes}

    def routing(self, x) -> dict[tuple[int, int], float]:
        get = self.getter(x)
        return {lk: math.exp(get(("t",) + lk)) for lk in self.links}

    def powers(self, x) -> dict[int, float]:
        get = self.getter(x)
        return {n: get(("P", n)) for n in self.nodes}

    def rates(self, x) -> dict[int, float]:
        get = self.getter(x)
        return {n: get(("rho", n)) for n in self.nodes}

    def reliabilities(self, x, collisions="access") -> dict[tuple[int, int], float]:
        """Exact link reliabilities at ``x``.

        ``collisions="access"`` uses 1 - mu for each colliding node (what the
        channel really sees); ``"silence"`` uses the modelled silence
        probabilities exp(nu).
        """
        get = self.getter(x)
        mu = self.transmit_prob(x)
        out = {}
        for lk in self.links:
            if collisions == "access":
                quiet = [1.0 - mu[m] for m in self.interf[lk]]
            else:
                quiet = [math.exp(get(("nu", m))) for m in self.interf[lk]]
            out[lk] = channel.link_reliability(get(("P", lk[0])), self.ls[lk], quiet)
        return out

    def modelled_reliabilities(self, x):
        """(lower, upper) reliability models used in the flow rows."""
        get = self.getter(x)
        lo, up = {}, {}
        for lk in self.links:
            coll = math.exp(sum(get(("nu", m)) for m in self.interf[lk]))
            lo[lk] = coll * (1.0 - float(channel.upper_of_squared(get(("yh",) + lk))))
            if ("yc",) + lk in self.index:
                up[lk] = coll * (1.0 - float(channel.lower_of_squared(get(("yc",) + lk))))
        return lo, up

    def realized_interference(self, x) -> dict[int, float]:
        """Average interference (W) at each protected point from all live nodes."""
        mu = self.transmit_prob(x)
        p = self.powers(x)
        out = {}
        for pt in self.points:
            terms = [mu[n] * math.exp(KAPPA * p[n] + pt.log_gain[n]) for n in self.nodes]
            out[pt.id] = float(sum(terms))
        return out

    def node_interference(self, x) -> dict[tuple[int, int], float]:
        mu = self.transmit_prob(x)
        p = self.powers(x)
        return {(pt.id, n): mu[n] * math.exp(KAPPA * p[n] + pt.log_gain[n])
                for pt in self.points for n in pt.members}

    def pu_margin_db(self, x) -> float:
        """Smallest cap-minus-interference margin over protected points (dB)."""
        if not self.points:
            return math.inf
        real = self.realized_interference(x)
        return min(10 * math.log10(pt.cap / real[pt.id]) for pt in self.points)
