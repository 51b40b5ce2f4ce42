"""Run pipelines on a scenario and write stamped CSV tables, traces and a JSON summary."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import subprocess
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .channel import fenton_wilkinson_link_stats, perturb_stats
from .model import RoutingModel
from .scenario import Scenario, ScenarioError, build_topology, load_scenario

log = logging.getLogger(__name__)

MODES = ("sca-central", "admm", "full", "deliver", "mc")
OUTPUT_ENV = "STATROUTE_OUTPUT_DIR"

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2


class ConfigError(ValueError):
    pass


class IntegrityError(RuntimeError):
    pass


class MismatchError(RuntimeError):
    pass


@dataclass
class RunConfig:
    mode: str
    scenario: str
    seed: int | None = None
    max_iters: int = 50
    tol: float = 1e-6
    beta: float = 0.1
    c: float = 1.0
    xi: str = "1/k"                # master step schedule (only 1/k is implemented)
    online: bool = False           # full mode: ADMM as inner solver instead of the centralized solve
    output_dir: str | None = None
    trials: int = 1
    trial_shadow_db: float = 3.0
    solution: str | None = None    # deliver/mc: solution.json from an earlier run
    packets: int = 10000
    slots: int = 100000
    admm_rounds: int = 100
    gap_tol: float = 1e-3
    figures: bool = True

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.xi != "1/k":
            raise ConfigError("only the 1/k step schedule is available")
        stochastic = self.mode == "mc" or self.trials > 1
        if stochastic and self.seed is None:
            raise ConfigError(f"mode {self.mode} with {self.trials} trial(s) needs --seed")
        if self.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if self.trials > 1 and self.mode not in ("sca-central", "full", "mc"):
            raise ConfigError("--trials applies to sca-central, full and mc")
        if self.mode == "deliver" and self.solution is None:
            raise ConfigError("mode deliver needs --solution")
        for name in ("tol", "beta", "c", "gap_tol"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"--{name.replace('_', '-')} must be positive")
        if self.max_iters < 1:
            raise ConfigError("--max-iters must be at least 1")
        return self

    def out_path(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_ENV) or "statroute-out")


@dataclass
class RunOutcome:
    exit_code: int
    output_dir: Path
    files: dict[str, str] = field(default_factory=dict)   # name -> sha256
    summary: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# output helpers

def build_id() -> str:
    """git describe of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(v):
    if isinstance(v, float):
        return repr(float(v)) if math.isfinite(v) else ("inf" if v > 0 else ("-inf" if v < 0 else "nan"))
    return str(v)


class Writer:
    """Collects CSV files with a provenance header and records their digests."""

    def __init__(self, out: Path, scenario_hash: str, seed):
        self.out = out
        self.header = f"# scenario={scenario_hash} build={build_id()} seed={seed}\n"
        self.files: dict[str, str] = {}
        out.mkdir(parents=True, exist_ok=True)

    def csv(self, name: str, columns: list[str], rows):
        buf = io.StringIO()
        buf.write(self.header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
        data = buf.getvalue().encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def json(self, name: str, obj):
        data = (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()
        (self.out / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def read_csv(path) -> tuple[str, list[dict]]:
    """(header comment, rows) of a CSV written by :class:`Writer`."""
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        rows = list(csv.DictReader(fh))
    return header, rows


# ---------------------------------------------------------------------------
# model construction

def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial)]).generate_state(1)[0])


def build_model(s: Scenario, perturb_seed: int | None = None, shadow_db: float = 3.0) -> RoutingModel:
    topo = build_topology(s)
    stats = fenton_wilkinson_link_stats(s, topo)
    if perturb_seed is not None:
        stats = perturb_stats(stats, s, perturb_seed, shadow_db)
    return RoutingModel(s, topo, stats)


def solution_record(model: RoutingModel, x, extra=None) -> dict:
    rec = {"scenario_hash": model.scenario.content_hash(), "keys": [list(k) for k in model.keys],
           "x": [float(v) for v in x]}
    rec.update(extra or {})
    return rec


def load_solution(model: RoutingModel, path) -> np.ndarray:
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("scenario_hash") != model.scenario.content_hash():
        raise MismatchError("solution was computed for a different scenario")
    vals = {tuple(k): v for k, v in zip(rec["keys"], rec["x"])}
    try:
        return np.array([vals[k] for k in model.keys])
    except KeyError as exc:
        raise MismatchError(f"solution lacks variable {exc.args[0]}") from None


# ---------------------------------------------------------------------------
# tables

def write_solution_tables(w: Writer, model: RoutingModel, x, prefix=""):
    rel = model.reliabilities(x)
    route = model.routing(x)
    w.csv(prefix + "routing.csv", ["from", "to", "t"], [(n, i, route[(n, i)]) for (n, i) in model.links])
    w.csv(prefix + "outage.csv", ["from", "to", "outage", "reliability"],
          [(n, i, 1.0 - rel[(n, i)], rel[(n, i)]) for (n, i) in model.links])
    mu, p, rho = model.transmit_prob(x), model.powers(x), model.rates(x)
    w.csv(prefix + "rates.csv", ["node", "rho", "mu", "power_dbw"],
          [(n, rho[n], mu[n], p[n]) for n in model.nodes])
    real = model.realized_interference(x)
    w.csv(prefix + "interference.csv", ["point", "realized_w", "cap_w", "margin_db"],
          [(pt.id, real[pt.id], pt.cap, 10 * math.log10(pt.cap / real[pt.id])) for pt in model.points])


def _sca_trace_rows(trace):
    return [(r.ell, r.objective, r.max_violation, r.kkt, r.newton_steps) for r in trace]


# ---------------------------------------------------------------------------
# modes

def _run_sca(cfg, s, w, summary, figs):
    from .sca import solve_centralized
    model = build_model(s)
    res = solve_centralized(model, max_iters=cfg.max_iters, tol=cfg.tol)
    write_solution_tables(w, model, res.x)
    w.csv("convergence.csv", ["ell", "objective", "max_violation", "kkt", "newton_steps"], _sca_trace_rows(res.trace))
    w.json("solution.json", solution_record(model, res.x))
    summary.update(status=res.status, iterations=res.iterations, objective=res.objective,
                   kkt=res.trace[-1].kkt if res.trace else None, pu_margin_db=model.pu_margin_db(res.x))
    figs.append(("solution", model, res.x))
    figs.append(("convergence", [r.objective for r in res.trace]))
    return res.status != "solver-failure"


def _run_admm(cfg, s, w, summary, figs):
    from . import admm, budget
    from .convex import solve
    from .sca import find_feasible_start
    model = build_model(s)
    x0 = find_feasible_start(model)
    alloc = budget.initial_allocation(model, x0)
    budgets = alloc.as_budgets()
    central = solve(model.surrogate(x0, budgets), x0)
    res = admm.run_admm(model, x0, budgets, beta=cfg.beta, c=cfg.c, max_rounds=cfg.admm_rounds,
                        gap_tol=cfg.gap_tol)
    rows = []
    for rec in res.gap_trace:
        for (j, n), g in sorted(rec["pairs"].items()):
            rows.append((rec["round"], j, n, g))
    w.csv("consensus.csv", ["round", "from", "to", "routing_gap"], rows)
    w.csv("consensus_summary.csv", ["round", "max_routing_gap", "max_residual", "augmented_lagrangian"],
          [(r["round"], r["max_route_gap"], r["max_residual"], r["lagrangian"]) for r in res.gap_trace])
    msgs = {}
    for m in res.messages:
        msgs[(m.round, m.kind)] = msgs.get((m.round, m.kind), 0) + 1
    w.csv("messages.csv", ["round", "kind", "count"], [(r, k, c) for (r, k), c in sorted(msgs.items())])
    (w.out / "messages.ndjson").unlink(missing_ok=True)
    res_bus = admm.MessageBus()
    res_bus.log = res.messages
    res_bus.dump(w.out / "messages.ndjson")
    x = admm.repair(model, res.x, budgets)
    write_solution_tables(w, model, x)
    summary.update(status="converged" if res.converged else "max-rounds", rounds=res.rounds,
                   objective=model.utility(x), centralized_objective=-central.objective,
                   objective_gap=abs(model.utility(x) + central.objective),
                   failed_local_solves=res.failed)
    figs.append(("consensus", res.gap_trace))
    figs.append(("solution", model, x))
    return True


def _run_full(cfg, s, w, summary, figs):
    from . import budget
    model = build_model(s)
    fc = budget.FullConfig(max_iters=cfg.max_iters, tol=cfg.tol, inner="admm" if cfg.online else "central",
                           admm_beta=cfg.beta, admm_c=cfg.c, admm_rounds=cfg.admm_rounds, admm_gap_tol=cfg.gap_tol)
    res = budget.run_full(model, fc)
    x = res.best_x if res.best_x is not None else res.x
    write_solution_tables(w, model, x)
    w.csv("convergence.csv", ["ell", "objective"], list(enumerate(res.objectives, 1)))
    w.csv("budgets.csv", ["ell", "k", "point", "node", "fraction", "budget_w", "realized_dbw"],
          [(r["ell"], r["k"], r["point"], r["node"], r["fraction"], r["budget_w"], r["realized_dbw"])
           for r in res.budget_trace])
    w.csv("safety.csv", ["ell", "k", "point", "realized_w", "cap_w"],
          [(r["ell"], r["k"], r["point"], r["realized_w"], r["cap_w"]) for r in res.safety_trace])
    w.json("solution.json", solution_record(model, x))
    worst = max(r["realized_w"] / r["cap_w"] for r in res.safety_trace)
    # reported point is the best master iterate; final iterate objective kept for reference
    summary.update(status=res.status, iterations=res.iterations, objective=model.utility(x),
                   final_objective=model.utility(res.x), best_ell=res.best_ell,
                   kkt=res.kkt, worst_interference_ratio=worst)
    figs.append(("solution", model, x))
    figs.append(("convergence", res.objectives))
    figs.append(("budgets", res.budget_trace))
    return res.status != "solver-failure"


def _solution_for(cfg, s, model):
    if cfg.solution:
        return load_solution(model, cfg.solution)
    from .sca import solve_centralized
    return solve_centralized(model, max_iters=cfg.max_iters, tol=cfg.tol).x


def _run_deliver(cfg, s, w, summary, figs):
    from . import delivery
    model = build_model(s)
    x = _solution_for(cfg, s, model)
    params = delivery.params_from_solution(model, x)
    verdict = delivery.check_deliverability(params.order, model.links, params.chi)
    M = params.matrix()
    rows = []
    for k, n in enumerate(params.order[:-1]):
        lim = delivery.limit_distribution(M, k, tol=1e-3, t_max=100000)
        rows.append((n, lim.steps, lim.converged, lim.theta[-1]))
    w.csv("delivery.csv", ["origin", "steps_to_tol", "converged", "sink_mass"], rows)
    w.csv("delivery_matrix.csv", ["to"] + [str(n) for n in params.order],
          [[params.order[i]] + list(M.D[i]) for i in range(len(params.order))])
    summary.update(status="ok", deliverable=verdict.deliverable, t_star=verdict.t_star, stuck=verdict.stuck,
                   recommendations=verdict.recommendations)
    return True


def _run_mc(cfg, s, w, summary, figs):
    from . import delivery
    model = build_model(s)
    x = _solution_for(cfg, s, model)
    params = delivery.params_from_solution(model, x)
    rows = []
    for k, n in enumerate(params.order[:-1]):
        horizon = 2000
        walk = delivery.tagged_walk(params, n, cfg.packets, horizon, seed=trial_seed(cfg.seed, 1000 + k))
        lim = delivery.limit_distribution(params.matrix(), k, tol=0.0, t_max=horizon)
        rows.append((n, walk.fraction, walk.stderr, lim.theta[-1],
                     float(np.mean(walk.delays)) if walk.delays.size else float("nan")))
    w.csv("mc_delivery.csv", ["origin", "mc_fraction", "stderr", "analytic_sink_mass", "mean_delay"], rows)
    sim = delivery.simulate_network(params, cfg.slots, seed=trial_seed(cfg.seed, 0))
    stable, slope = delivery.queues_stable(sim.queue_trace)
    nodes = params.order[:-1]
    w.csv("queues.csv", ["window"] + [f"node{n}" for n in nodes],
          [[k] + list(r) for k, r in enumerate(sim.queue_trace)])
    w.csv("queue_drift.csv", ["node", "slope_per_slot"], list(zip(nodes, slope)))
    summary.update(status="ok", generated=sim.packets, delivered=sim.delivered, stable=stable,
                   mean_delay=float(np.mean(sim.delays)) if sim.delays.size else None)
    figs.append(("queues", nodes, sim.queue_trace))
    return True


def _run_trials(cfg, s, w, summary, figs):
    """Average rates over perturbed shadowing realizations."""
    from . import budget
    from .sca import solve_centralized
    rows, sums, statuses = [], [], []
    per_node: dict[int, list[float]] = {}
    for trial in range(cfg.trials):
        model = build_model(s, trial_seed(cfg.seed, trial), cfg.trial_shadow_db)
        if cfg.mode == "full":
            res = budget.run_full(model, budget.FullConfig(max_iters=cfg.max_iters, tol=cfg.tol))
            x, status = (res.best_x if res.best_x is not None else res.x), res.status
        else:
            res = solve_centralized(model, max_iters=cfg.max_iters, tol=cfg.tol)
            x, status = res.x, res.status
        rho = model.rates(x)
        for n in s.node_ids:
            v = rho.get(n, 0.0)
            rows.append((trial, n, v))
            per_node.setdefault(n, []).append(v)
        sums.append(sum(rho.values()))
        statuses.append(status)
    w.csv("rates_trials.csv", ["trial", "node", "rho"], rows)
    w.csv("rates_mean.csv", ["node", "mean_rho", "std_rho"],
          [(n, float(np.mean(v)), float(np.std(v))) for n, v in per_node.items()])
    summary.update(status="ok" if "solver-failure" not in statuses else "partial", trials=cfg.trials,
                   mean_sum_rho=float(np.mean(sums)), trial_status=statuses)
    figs.append(("rates", {n: float(np.mean(v)) for n, v in per_node.items()}))
    return "solver-failure" not in statuses


_DISPATCH = {"sca-central": _run_sca, "admm": _run_admm, "full": _run_full, "deliver": _run_deliver, "mc": _run_mc}


def run(cfg: RunConfig) -> RunOutcome:
    """Execute one run; never raises for expected failures, returns the exit code instead."""
    from .convex import SolverError
    from .sca import InfeasibleStart, SCAFailure
    out = cfg.out_path()
    try:
        cfg.validate()
        s = load_scenario(cfg.scenario)
    except (ConfigError, ScenarioError, OSError) as exc:
        return _fail(out, EXIT_INPUT, exc)
    w = Writer(out, s.content_hash(), cfg.seed)
    summary = {"mode": cfg.mode, "scenario": s.name, "scenario_hash": s.content_hash(),
               "network_hash": s.network_hash(), "seed": cfg.seed, "build": build_id(),
               "config": {k: v for k, v in asdict(cfg).items() if k not in ("output_dir",)}}
    figs: list = []
    try:
        if cfg.trials > 1:
            ok = _run_trials(cfg, s, w, summary, figs)
        else:
            ok = _DISPATCH[cfg.mode](cfg, s, w, summary, figs)
    except (InfeasibleStart, SolverError, SCAFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(out, EXIT_NUMERICAL, exc)
    except (MismatchError, ScenarioError, OSError, KeyError) as exc:
        return _fail(out, EXIT_INPUT, exc)
    if cfg.figures and figs:
        from . import plotting
        summary["figures"] = plotting.render(out / "figures", s, figs)
    summary["files"] = dict(sorted(w.files.items()))
    data = (json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n").encode()
    (out / "summary.json").write_bytes(data)
    (out / "error.json").unlink(missing_ok=True)   # stale status from an earlier run here
    return RunOutcome(EXIT_OK if ok else EXIT_NUMERICAL, out, w.files, summary)


def _fail(out: Path, code: int, exc: Exception) -> RunOutcome:
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").unlink(missing_ok=True)
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    binding = getattr(exc, "binding", None)
    if binding:
        rec["binding"] = binding
    for attr in ("field", "line"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    (out / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
    log.error("%s: %s", rec["error"], rec["message"])
    return RunOutcome(code, out, {}, rec)


# ---------------------------------------------------------------------------
# comparison

def _verify(d: Path) -> dict:
    try:
        summary = json.loads((d / "summary.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{d}: unreadable summary ({exc})") from None
    for name, digest in summary.get("files", {}).items():
        p = d / name
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != digest:
            raise IntegrityError(f"{p}: contents do not match the recorded digest")
    return summary


def _table(d: Path, name, key_cols, val_col):
    p = d / name
    if not p.exists():
        return {}
    _, rows = read_csv(p)
    return {tuple(int(r[c]) for c in key_cols): float(r[val_col]) for r in rows}


def compare_runs(a, b) -> dict:
    """Per-metric deltas ``b - a`` between two result directories of the same network."""
    a, b = Path(a), Path(b)
    sa, sb = _verify(a), _verify(b)
    if sa.get("network_hash") != sb.get("network_hash"):
        raise MismatchError("runs use different networks")
    deltas = []
    flags = []
    for name, keys, col, label in (("rates.csv", ["node"], "rho", "rho"),
                                   ("rates.csv", ["node"], "power_dbw", "P"),
                                   ("rates.csv", ["node"], "mu", "mu"),
                                   ("routing.csv", ["from", "to"], "t", "t")):
        ta, tb = _table(a, name, keys, col), _table(b, name, keys, col)
        for k in sorted(set(ta) | set(tb)):
            va, vb = ta.get(k, 0.0), tb.get(k, 0.0)
            deltas.append({"metric": label, "key": "->".join(map(str, k)), "a": va, "b": vb, "delta": vb - va})
            if label == "P" and abs(vb - va) >= 3.0:
                flags.append(f"P_{k[0]} {'increased' if vb > va else 'decreased'} by {abs(vb - va):.1f} dB")
            if label == "t" and abs(vb - va) >= 0.1:
                flags.append(f"t_{{{k[0]}->{k[1]}}} {'increased' if vb > va else 'decreased'} "
                             f"({va:.2f} -> {vb:.2f})")
    ra, rb = _table(a, "rates.csv", ["node"], "rho"), _table(b, "rates.csv", ["node"], "rho")
    if ra or rb:
        tot_a, tot_b = sum(ra.values()), sum(rb.values())
        deltas.append({"metric": "sum_rho", "key": "", "a": tot_a, "b": tot_b, "delta": tot_b - tot_a})
        flags.append(f"total rate {'increased' if tot_b > tot_a else 'did not increase'} "
                     f"({tot_a:.4f} -> {tot_b:.4f})")
    return {"a": str(a), "b": str(b), "deltas": deltas, "flags": flags,
            "identical": all(d["delta"] == 0 for d in deltas)}


def write_comparison(report: dict, path) -> None:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["metric", "key", "a", "b", "delta"])
    for d in report["deltas"]:
        wr.writerow([d["metric"], d["key"], _fmt(d["a"]), _fmt(d["b"]), _fmt(d["delta"])])
    Path(path).write_text(buf.getvalue())
