"""Successive convex approximation of the statistical routing problem."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import channel
from .convex import ConvexProgram, SolveReport, check_kkt, solve
from .convex import _polish_multipliers
from .model import RoutingModel
from .units import KAPPA

log = logging.getLogger(__name__)

START_MU = 0.05
START_ROUTE_SCALE = 0.9
START_RATE_SCALE = 0.9


class InfeasibleStart(RuntimeError):
    """No strictly feasible starting point; ``binding`` names the culprit."""

    def __init__(self, message, binding=None):
        super().__init__(message)
        self.binding = binding


class SCAFailure(RuntimeError):
    pass


@dataclass
class NodeVars:
    """Per-node variables in natural units (logs kept where the solver uses them)."""
    node: int
    P: float
    lam: float
    nu: float
    rho: float
    t: dict[int, float] = field(default_factory=dict)
    yh: dict[int, float] = field(default_factory=dict)
    yc: dict[int, float] = field(default_factory=dict)    # keyed by sender j

    @property
    def mu(self):
        """Transmit probability (the stability offset is added by the model)."""
        return math.exp(self.lam)


def to_node_vars(model: RoutingModel, x) -> dict[int, NodeVars]:
    get = model.getter(x)
    out = {}
    for n in model.nodes:
        out[n] = NodeVars(
            n, get(("P", n)), get(("lam", n)), get(("nu", n)), get(("rho", n)),
            t={i: get(("t", n, i)) for i in model.out[n]},
            yh={i: get(("yh", n, i)) for i in model.out[n]},
            yc={j: get(("yc", j, n)) for j in model.inn[n]},
        )
    return out


def from_node_vars(model: RoutingModel, nv: dict[int, NodeVars]) -> np.ndarray:
    x = np.zeros(model.n_vars)
    idx = model.index
    for n, v in nv.items():
        x[idx[("P", n)]] = v.P
        x[idx[("lam", n)]] = v.lam
        x[idx[("nu", n)]] = v.nu
        x[idx[("rho", n)]] = v.rho
        for i, val in v.t.items():
            x[idx[("t", n, i)]] = val
        for i, val in v.yh.items():
            x[idx[("yh", n, i)]] = val
        for j, val in v.yc.items():
            x[idx[("yc", j, n)]] = val
    return x


# ---------------------------------------------------------------------------
# feasible start

def find_feasible_start(model: RoutingModel, budgets=None) -> np.ndarray:
    """A strictly feasible point of the exact problem.

    Uniform routing over usable out-links, transmit probability 0.05,
    powers backed off so every protected point keeps a 3 dB margin, and
    departure rates chosen by a small LP that maximizes the worst flow
    slack; rates are then 90% of the resulting slack.
    """
    eps = model.eps
    cfg = model.config
    for pt in model.points:
        if pt.cap <= 0 or pt.cap_eff <= 0:
            raise InfeasibleStart(f"protected point {pt.id}: cap leaves no room for any transmission",
                                  binding=f"pu[{pt.id}]")
    need = {}
    for n in model.nodes:
        need[n] = max(model.ls[(n, i)].threshold - model.ls[(n, i)].m
                      + model.ls[(n, i)].sigma * math.sqrt(cfg.y_floor) * 1.02 + 0.05
                      for i in model.out[n])
        need[n] = max(need[n], model.pmax[n] - cfg.power_range_db + 0.01)
        if need[n] >= model.pmax[n]:
            raise InfeasibleStart(f"node {n} cannot decode any next hop below its max power",
                                  binding=f"yhat[{n},*]")

    def access_caps(p):
        # largest access probability per node keeping every point at half its
        # (effective or per-node) cap
        mu = {n: START_MU for n in model.nodes}
        for pt in model.points:
            if budgets is None:
                total = sum(START_MU * math.exp(KAPPA * p[n] + pt.log_gain[n]) for n in pt.members)
                scale = min(1.0, 0.5 * pt.cap_eff / total) if total > 0 else 1.0
                for n in pt.members:
                    mu[n] = min(mu[n], START_MU * scale)
            else:
                for n in pt.members:
                    room = 0.5 * budgets[(pt.id, n)] * pt.cap_eff
                    mu[n] = min(mu[n], room / math.exp(KAPPA * p[n] + pt.log_gain[n]))
        return mu

    p = {n: model.pmax[n] - 0.01 for n in model.nodes}
    mu_hi = access_caps(p)
    # backing off power buys access probability one-for-one (in dB)
    for n in model.nodes:
        if mu_hi[n] < START_MU:
            p[n] = max(need[n], p[n] - 10.0 * math.log10(START_MU / mu_hi[n]))
    mu_hi = access_caps(p)
    for n in model.nodes:
        if mu_hi[n] <= 2 * eps:
            raise InfeasibleStart(f"node {n}: interference caps force the access probability below epsilon",
                                  binding=f"pu@{n}")

    t = {lk: math.log(START_ROUTE_SCALE / len(model.out[lk[0]])) for lk in model.links}
    nu = {n: math.log(0.999 * (1.0 - mu_hi[n])) for n in model.nodes}
    yh, yc = {}, {}
    for lk in model.links:
        ls = model.ls[lk]
        x2 = (ls.margin(p[lk[0]]) / ls.sigma) ** 2 if ls.sigma > 0 else 1e6
        yh[lk] = cfg.y_floor + 0.95 * (x2 - cfg.y_floor)
        yc[lk] = max(cfg.y_floor, x2) * 1.02 + 1e-3

    # flow slack is linear in lambda: a_n lam_n - sum_j b_jn lam_j
    nodes = model.nodes
    pos = {n: k for k, n in enumerate(nodes)}
    A = np.zeros((len(nodes), len(nodes)))
    for lk in model.links:
        n, i = lk
        coll = math.exp(sum(nu[m] for m in model.interf[lk]))
        A[pos[n], pos[n]] += math.exp(t[lk]) * coll * (1.0 - float(channel.upper_of_squared(yh[lk])))
        if i in pos:  # the sink keeps no flow row
            A[pos[i], pos[n]] -= math.exp(t[lk]) * coll * (1.0 - float(channel.lower_of_squared(yc[lk])))
    # maximize delta s.t. A lam >= delta * lam_hi-scale, lam in [tiny, lam_hi]
    lam_hi = np.array([mu_hi[n] - eps for n in nodes])
    k = len(nodes)
    c = np.zeros(k + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-A, np.ones((k, 1))])
    res = optimize.linprog(c, A_ub=A_ub, b_ub=np.zeros(k),
                           bounds=[(1e-4 * h, h) for h in lam_hi] + [(None, None)], method="highs")
    if res.status != 0 or res.x[-1] <= 0:
        worst = nodes[int(np.argmin(A @ lam_hi))]
        raise InfeasibleStart(f"flow conservation cannot be met with positive rates at node {worst}",
                              binding=f"flow[{worst}]")
    lam = res.x[:k]
    slack = A @ lam

    x = np.zeros(model.n_vars)
    idx = model.index
    for n in nodes:
        x[idx[("P", n)]] = p[n]
        x[idx[("lam", n)]] = math.log(lam[pos[n]])
        x[idx[("nu", n)]] = nu[n]
        x[idx[("rho", n)]] = START_RATE_SCALE * slack[pos[n]]
    for lk in model.links:
        x[idx[("t",) + lk]] = t[lk]
        x[idx[("yh",) + lk]] = yh[lk]
        if ("yc",) + lk in idx:
            x[idx[("yc",) + lk]] = yc[lk]
    vals = model.true_values(x, budgets)
    name, worst = max(vals.items(), key=lambda kv: kv[1])
    if worst >= 0 or np.any(x <= model.lower) or np.any(x >= model.upper):
        raise InfeasibleStart(f"start violates {name} ({worst:.3e})", binding=name)
    return x


# ---------------------------------------------------------------------------
# surrogate and iteration

@dataclass
class SurrogateState:
    """Anchor of one SCA step and the convex program built around it."""
    anchor: np.ndarray
    program: ConvexProgram
    budgets: dict | None = None


def build_surrogate(model: RoutingModel, anchor, budgets=None, check=True) -> SurrogateState:
    anchor = np.asarray(anchor, dtype=float)
    if check:
        v = model.max_violation(anchor, budgets)
        if v > 1e-9:
            raise ValueError(f"anchor is not feasible (max violation {v:.3e})")
    return SurrogateState(anchor.copy(), model.surrogate(anchor, budgets), budgets)


def certify(program: ConvexProgram, x, multipliers):
    """KKT residual of ``program`` at ``x`` after refitting the active duals."""
    mult = _polish_multipliers(program, np.asarray(x, dtype=float), multipliers)
    return check_kkt(program, x, mult), mult


@dataclass
class IterRecord:
    ell: int
    objective: float
    max_violation: float
    kkt: float
    newton_steps: int


@dataclass
class SCAResult:
    x: np.ndarray
    status: str                 # converged | max-iter | solver-failure
    trace: list[IterRecord]
    report: SolveReport | None
    multipliers: dict

    @property
    def iterations(self):
        return len(self.trace)

    @property
    def objective(self):
        return self.trace[-1].objective if self.trace else float("nan")


def sca_step(model: RoutingModel, x, budgets=None, solver_tol=1e-8):
    state = build_surrogate(model, x, budgets)
    return state, solve(state.program, x, tol=solver_tol)


def sca_iterate(model: RoutingModel, start, max_iters: int = 50, tol: float = 1e-6,
                kkt_tol: float = 1e-5, budgets=None, solver_tol: float = 1e-8,
                inner=None) -> SCAResult:
    """Run surrogate solves until the objective stalls.

    ``inner(program, x)`` may replace the centralized barrier solve; it must
    return a SolveReport. Every accepted iterate is checked against the
    exact constraints, and a failing solve stops the loop with the last
    feasible point.
    """
    x = np.asarray(start, dtype=float).copy()
    if model.max_violation(x, budgets) > 1e-9:
        raise ValueError("start point is not feasible")
    obj = model.utility(x)
    trace: list[IterRecord] = []
    status = "max-iter"
    last_report = None
    mult = {}
    for ell in range(1, max_iters + 1):
        state = build_surrogate(model, x, budgets)
        rep = solve(state.program, x, tol=solver_tol) if inner is None else inner(state.program, x)
        if rep.status == "infeasible" or not np.all(np.isfinite(rep.x)):
            status = "solver-failure"
            log.warning("SCA step %d: subproblem failed (%s)", ell, rep.status)
            break
        viol = model.max_violation(rep.x, budgets)
        new_obj = model.utility(rep.x)
        if viol > 1e-9 or new_obj < obj - 1e-9 * max(1.0, abs(obj)):
            status = "solver-failure"
            log.warning("SCA step %d rejected (violation %.3e, objective %.9g -> %.9g)", ell, viol, obj, new_obj)
            break
        x = rep.x
        kkt, mult = certify(model.surrogate(x, budgets), x, rep.multipliers)
        trace.append(IterRecord(ell, new_obj, viol, kkt.max, rep.newton_steps))
        last_report = rep
        log.info("SCA %2d: objective %.8f  kkt %.2e  newton %d", ell, new_obj, kkt.max, rep.newton_steps)
        done = abs(new_obj - obj) < tol and kkt.max <= kkt_tol
        obj = new_obj
        if done:
            status = "converged"
            break
    return SCAResult(x, status, trace, last_report, mult)


def solve_centralized(model: RoutingModel, max_iters=50, tol=1e-6, budgets=None) -> SCAResult:
    x0 = find_feasible_start(model, budgets)
    return sca_iterate(model, x0, max_iters=max_iters, tol=tol, budgets=budgets)
