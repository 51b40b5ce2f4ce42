"""Primal decomposition of PU interference caps into per-node budgets.

Budgets are kept as fractions of each point's effective cap, so the
master update of point R is a projected subgradient step on the capped
simplex ``{b >= floor, sum b <= 1}`` using the multipliers of the per-node
budget rows as subgradients.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .convex import solve
from .model import RoutingModel, row_multipliers
from .sca import InfeasibleStart, certify, find_feasible_start
from .units import KAPPA

log = logging.getLogger(__name__)

FLOOR_FACTOR = 4.0   # floors sit this far above a node's least possible interference


class HeadNodeError(RuntimeError):
    pass


class NegativeMultiplier(RuntimeError):
    pass


def project_capped_simplex(v, cap: float) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) <= cap}``.

    Exact: sort-based threshold search, O(n log n).
    """
    v = np.asarray(v, dtype=float)
    if not cap > 0:
        raise ValueError("cap must be positive")
    x = np.maximum(v, 0.0)
    if x.sum() <= cap:
        return x
    # sum constraint active: x = max(v - theta, 0) with sum = cap
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, u.size + 1)
    cond = u - (css - cap) / k > 0
    r = k[cond][-1]
    theta = (css[r - 1] - cap) / r
    return np.maximum(v - theta, 0.0)


def project_with_floor(v, floor, cap: float = 1.0) -> np.ndarray:
    """Projection onto ``{x >= floor, sum(x) <= cap}`` (shifted capped simplex)."""
    floor = np.asarray(floor, dtype=float)
    room = cap - floor.sum()
    if room <= 0:
        raise ValueError("floors exhaust the cap")
    return floor + project_capped_simplex(np.asarray(v, dtype=float) - floor, room)


@dataclass
class BudgetAllocation:
    """Per-point budget fractions of the effective cap, with per-node floors."""
    fractions: dict[int, dict[int, float]]      # point -> node -> fraction
    floors: dict[int, dict[int, float]]
    head: dict[int, int]

    def as_budgets(self) -> dict[tuple[int, int], float]:
        return {(r, n): f for r, alloc in self.fractions.items() for n, f in alloc.items()}

    def watts(self, model: RoutingModel) -> dict[tuple[int, int], float]:
        caps = {pt.id: pt.cap_eff for pt in model.points}
        return {(r, n): f * caps[r] for (r, n), f in self.as_budgets().items()}

    def copy(self) -> "BudgetAllocation":
        return BudgetAllocation({r: dict(a) for r, a in self.fractions.items()}, self.floors, self.head)

    def max_change(self, other: "BudgetAllocation") -> float:
        return max((abs(f - other.fractions[r][n]) for r, a in self.fractions.items() for n, f in a.items()),
                   default=0.0)


def subgradient_step(alloc: BudgetAllocation, multipliers: dict[tuple[int, int], float], step: float,
                     normalize: bool = False) -> BudgetAllocation:
    """``b <- Project(b + step * u)`` independently for every point.

    With ``normalize`` each point's subgradient is divided by its largest
    entry, so ``step`` is the biggest move of any budget (in cap fractions).
    """
    new = {}
    for r, a in alloc.fractions.items():
        nodes = sorted(a)
        u = np.array([multipliers.get((r, n), 0.0) for n in nodes])
        if np.any(u < -1e-9):
            bad = nodes[int(np.argmin(u))]
            raise NegativeMultiplier(f"budget row of node {bad} at point {r} has multiplier {u.min():.3e}")
        u = np.maximum(u, 0.0)
        if normalize and u.max() > 0:
            u = u / u.max()
        b = np.array([a[n] for n in nodes])
        fl = np.array([alloc.floors[r][n] for n in nodes])
        proj = project_with_floor(b + step * u, fl)
        new[r] = dict(zip(nodes, proj.tolist()))
    return BudgetAllocation(new, alloc.floors, alloc.head)


# ---------------------------------------------------------------------------
# setup

def _min_power(model: RoutingModel, n) -> float:
    cfg = model.config
    need = max(model.ls[(n, i)].threshold - model.ls[(n, i)].m
               + model.ls[(n, i)].sigma * math.sqrt(cfg.y_floor) for i in model.out[n])
    return max(need, model.pmax[n] - cfg.power_range_db)


def budget_floors(model: RoutingModel) -> dict[int, dict[int, float]]:
    """Smallest budgets that still leave every node a feasible operating point."""
    floors = {}
    lam_min = math.exp(model.config.log_floor)
    for pt in model.points:
        floors[pt.id] = {}
        for n in pt.members:
            least = (lam_min + model.eps) * math.exp(KAPPA * _min_power(model, n) + pt.log_gain[n]) / pt.cap_eff
            floors[pt.id][n] = FLOOR_FACTOR * least
        if sum(floors[pt.id].values()) >= 1.0:
            raise InfeasibleStart(f"point {pt.id}: members cannot all stay below the cap", binding=f"pu[{pt.id}]")
    return floors


def head_nodes(model: RoutingModel) -> dict[int, int]:
    """Lowest-id member of each neighborhood; every member must reach it."""
    adj = {n: set() for n in model.nodes}
    for (a, b) in model.links:
        if b in adj:
            adj[a].add(b)
            adj[b].add(a)
    heads = {}
    for pt in model.points:
        if not pt.members:
            continue
        head = min(pt.members)
        seen, stack = {head}, [head]
        while stack:
            u = stack.pop()
            for w in adj[u] - seen:
                seen.add(w)
                stack.append(w)
        lost = [n for n in pt.members if n not in seen]
        if lost:
            raise HeadNodeError(f"point {pt.id}: nodes {lost} cannot reach head node {head}")
        heads[pt.id] = head
    return heads


def initial_allocation(model: RoutingModel, x) -> BudgetAllocation:
    """Current usage at ``x`` plus an equal share of the unused room."""
    floors = budget_floors(model)
    used = model.node_interference(x)
    fr = {}
    for pt in model.points:
        if not pt.members:
            continue
        u = {n: max(used[(pt.id, n)] / pt.cap_eff, floors[pt.id][n]) for n in pt.members}
        slack = 1.0 - sum(u.values())
        if slack <= 0:
            raise InfeasibleStart(f"point {pt.id} is saturated at the start point", binding=f"pu[{pt.id}]")
        fr[pt.id] = {n: u[n] + slack / len(pt.members) for n in pt.members}
    return BudgetAllocation(fr, floors, head_nodes(model))


def apriori_allocation(model: RoutingModel) -> BudgetAllocation:
    """Fixed split proportional to mean path gain (nearer nodes get more room)."""
    floors = budget_floors(model)
    fr = {}
    for pt in model.points:
        if not pt.members:
            continue
        g = {n: math.exp(pt.log_gain[n]) for n in pt.members}
        room = 1.0 - sum(floors[pt.id].values())
        tot = sum(g.values())
        fr[pt.id] = {n: floors[pt.id][n] + room * g[n] / tot for n in pt.members}
    return BudgetAllocation(fr, floors, head_nodes(model))


# ---------------------------------------------------------------------------
# the full on-line algorithm

@dataclass
class FullConfig:
    max_iters: int = 50
    tol: float = 1e-6
    max_k: int = 10
    budget_tol: float = 1e-4        # stop the master loop when no fraction moves more than this
    max_halvings: int = 6
    apriori: bool = False           # fixed budgets, no master problem
    inner: str = "central"          # central | admm
    admm_beta: float = 0.1
    admm_c: float = 1.0
    admm_rounds: int = 100
    admm_gap_tol: float = 1e-3
    solver_tol: float = 1e-8
    normalize_step: bool = True     # scale-free steps: 1/k is the largest budget move
    restart_steps: bool = False     # restart the 1/k schedule at every SCA iteration
    step0: float = 0.5              # master step is step0 / k


@dataclass
class FullResult:
    x: np.ndarray
    allocation: BudgetAllocation
    status: str
    objectives: list[float]
    budget_trace: list[dict] = field(default_factory=list)    # ell, k, point, node, fraction, watts
    safety_trace: list[dict] = field(default_factory=list)    # ell, k, point, realized W, cap W
    allocations: list[BudgetAllocation] = field(default_factory=list)  # per SCA iteration
    master_values: list[tuple[int, int, float]] = field(default_factory=list)
    kkt: float = math.inf
    best_x: np.ndarray | None = None     # iterate with the largest objective
    best_ell: int = 0

    @property
    def iterations(self) -> int:
        return len(self.objectives)


def _inner_solve(model: RoutingModel, anchor, budgets, cfg: FullConfig):
    """Solve the budgeted surrogate; returns (x, budget multipliers, solver duals) or None."""
    prog = model.surrogate(anchor, budgets)
    if cfg.inner == "admm":
        from . import admm
        res = admm.run_admm(model, anchor, budgets, beta=cfg.admm_beta, c=cfg.admm_c,
                            max_rounds=cfg.admm_rounds, gap_tol=cfg.admm_gap_tol)
        x = admm.repair(model, res.x, budgets)
        if model.max_violation(x, budgets) <= 1e-9:
            mult = {}
            for n, ag in res.agents.items():
                if ag.last is not None:
                    for name, lam in row_multipliers(*ag.last).items():
                        if name.startswith("budget["):
                            mult[name] = lam
            return x, _parse_budget_mult(mult), None
        log.warning("ADMM iterate could not be repaired; falling back to the centralized solve")
    rep = solve(prog, anchor, tol=cfg.solver_tol)
    if rep.status == "infeasible" or not np.all(np.isfinite(rep.x)):
        return None
    if model.max_violation(rep.x, budgets) > 1e-9:
        return None
    _, mult = certify(prog, rep.x, rep.multipliers)
    named = {k: v for k, v in row_multipliers(prog, mult).items() if k.startswith("budget[")}
    return rep.x, _parse_budget_mult(named), rep.multipliers


def _parse_budget_mult(named: dict[str, float]) -> dict[tuple[int, int], float]:
    out = {}
    for name, lam in named.items():
        r, n = name[len("budget["):-1].split(",")
        out[(int(r), int(n))] = float(lam)
    return out


def _record_safety(model, x, ell, k, trace):
    real = model.realized_interference(x)
    for pt in model.points:
        trace.append({"ell": ell, "k": k, "point": pt.id, "realized_w": real[pt.id], "cap_w": pt.cap})


def _record_budgets(model, alloc, x, ell, k, trace):
    used = model.node_interference(x)
    caps = {pt.id: pt.cap_eff for pt in model.points}
    for r, a in alloc.fractions.items():
        for n, f in a.items():
            u = used[(r, n)]
            trace.append({"ell": ell, "k": k, "point": r, "node": n, "fraction": f, "budget_w": f * caps[r],
                          "realized_dbw": 10 * math.log10(u) if u > 0 else -math.inf})


def run_full(model: RoutingModel, cfg: FullConfig | None = None, start=None,
             allocation: BudgetAllocation | None = None) -> FullResult:
    """SCA outer loop with a primal-decomposition master loop around each surrogate."""
    cfg = cfg or FullConfig()
    x = None if start is None else np.asarray(start, dtype=float)
    if allocation is None:
        if cfg.apriori:
            allocation = apriori_allocation(model)
        else:
            if x is None:
                x = find_feasible_start(model)
            allocation = initial_allocation(model, x)
    alloc = allocation.copy()
    if x is None or model.max_violation(x, alloc.as_budgets()) > 1e-9:
        x = find_feasible_start(model, alloc.as_budgets())
    res = FullResult(x, alloc, "max-iter", [])
    _record_safety(model, x, 0, 0, res.safety_trace)
    _record_budgets(model, alloc, x, 0, 0, res.budget_trace)
    obj = model.utility(x)
    duals = None
    k_master = 0     # step index, carried across SCA iterations
    for ell in range(1, cfg.max_iters + 1):
        anchor = x.copy()
        moved = 0.0
        out = _inner_solve(model, anchor, alloc.as_budgets(), cfg)
        if out is None:
            res.status = "solver-failure"
            log.warning("SCA step %d: budgeted subproblem failed", ell)
            break
        x_k, u, duals = out
        res.master_values.append((ell, 1, model.utility(x_k)))
        _record_safety(model, x_k, ell, 1, res.safety_trace)
        _record_budgets(model, alloc, x_k, ell, 1, res.budget_trace)
        if not cfg.apriori:
            k = 1
            if cfg.restart_steps:
                k_master = 0
            while k < cfg.max_k:
                k_master += 1
                step = cfg.step0 / k_master
                trial = None
                for _ in range(cfg.max_halvings + 1):
                    cand = subgradient_step(alloc, u, step, cfg.normalize_step)
                    if cand.max_change(alloc) < cfg.budget_tol:
                        trial = None
                        break
                    got = _inner_solve(model, anchor, cand.as_budgets(), cfg)
                    if got is not None:
                        trial = (cand, got)
                        break
                    step *= 0.5
                if trial is None:
                    break
                k += 1
                cand, (x_k, u, duals) = trial
                moved = max(moved, cand.max_change(alloc))
                alloc = cand
                res.master_values.append((ell, k, model.utility(x_k)))
                _record_safety(model, x_k, ell, k, res.safety_trace)
                _record_budgets(model, alloc, x_k, ell, k, res.budget_trace)
        new_obj = model.utility(x_k)
        if cfg.inner == "central" and new_obj < obj - 1e-9 * max(1.0, abs(obj)) and moved == 0.0:
            res.status = "solver-failure"
            log.warning("SCA step %d decreased the objective (%.9g -> %.9g)", ell, obj, new_obj)
            break
        x = x_k
        res.objectives.append(new_obj)
        res.allocations.append(alloc.copy())
        if res.best_x is None or new_obj > max(res.objectives[:-1], default=-math.inf):
            res.best_x, res.best_ell = x.copy(), ell
        log.info("full %2d: objective %.8f  budgets moved %.2e", ell, new_obj, moved)
        done = abs(new_obj - obj) < cfg.tol and moved < cfg.budget_tol
        obj = new_obj
        if done:
            res.status = "converged"
            break
    res.x = x
    if res.best_x is None:
        res.best_x = x.copy()
    res.allocation = alloc
    if duals is not None:
        kkt, _ = certify(model.surrogate(x, alloc.as_budgets()), x, duals)
        res.kkt = kkt.max
    return res
