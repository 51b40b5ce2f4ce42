"""Matplotlib figures for a finished run (Agg backend, PNG files)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path.name


def network_figure(path, s, model=None, x=None) -> str:
    """Node layout with protected points; routed links drawn with width ~ t."""
    fig, ax = plt.subplots(figsize=(6, 5))
    pos = {n.id: (n.x, n.y) for n in s.nodes}
    pos[s.sink.id] = (s.sink.x, s.sink.y)
    if model is not None and x is not None:
        route = model.routing(x)
        for (n, i), t in route.items():
            if t < 1e-3:
                continue
            (x0, y0), (x1, y1) = pos[n], pos[i]
            ax.annotate("", xy=(x1, y1), xytext=(x0, y0),
                        arrowprops=dict(arrowstyle="->", lw=0.5 + 3 * t, color="tab:blue", alpha=0.7))
    xs = np.array([pos[n] for n in s.node_ids])
    ax.scatter(xs[:, 0], xs[:, 1], c="tab:blue", zorder=3, label="CR nodes")
    for n in s.node_ids:
        ax.annotate(str(n), pos[n], textcoords="offset points", xytext=(4, 4))
    ax.scatter([s.sink.x], [s.sink.y], marker="s", c="k", zorder=3, label="sink")
    pts = s.protected_points
    if pts:
        ax.scatter([p.x for p in pts], [p.y for p in pts], marker="x", c="tab:red", label="protected points")
    pus = s.active_pus
    if pus:
        ax.scatter([p.x for p in pus], [p.y for p in pus], marker="^", c="tab:orange", label="active PUs")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize=8, loc="best")
    ax.set_aspect("equal", adjustable="datalim")
    return _save(fig, Path(path))


def rates_figure(path, rates: dict) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    nodes = sorted(rates)
    ax.bar([str(n) for n in nodes], [rates[n] for n in nodes], color="tab:green")
    ax.set_xlabel("node")
    ax.set_ylabel("rate (packets/slot)")
    return _save(fig, Path(path))


def convergence_figure(path, objectives) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(objectives) + 1), objectives, "o-")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("sum of rates")
    ax.grid(alpha=0.3)
    return _save(fig, Path(path))


def consensus_figure(path, gap_trace) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    r = [g["round"] for g in gap_trace]
    ax.semilogy(r, [max(g["max_route_gap"], 1e-16) for g in gap_trace], label="routing gap")
    ax.semilogy(r, [max(g["max_residual"], 1e-16) for g in gap_trace], label="max residual")
    ax.set_xlabel("round")
    ax.legend()
    ax.grid(alpha=0.3, which="both")
    return _save(fig, Path(path))


def budgets_figure(path, budget_trace) -> str:
    """Final-k budget fraction per (point, node) against the outer iteration."""
    last = {}
    for r in budget_trace:
        key = (r["ell"], r["point"], r["node"])
        if key not in last or r["k"] >= last[key][0]:
            last[key] = (r["k"], r["fraction"])
    series: dict[tuple[int, int], list] = {}
    for (ell, pt, n), (_, f) in sorted(last.items()):
        series.setdefault((pt, n), []).append((ell, f))
    fig, ax = plt.subplots(figsize=(6, 4))
    for (pt, n), pts in series.items():
        a = np.array(pts)
        ax.plot(a[:, 0], a[:, 1], lw=1, label=f"R{pt}/n{n}")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("budget fraction of cap")
    if len(series) <= 16:
        ax.legend(fontsize=6, ncol=2)
    return _save(fig, Path(path))


def queues_figure(path, nodes, trace) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for k, n in enumerate(nodes):
        ax.plot(trace[:, k], label=f"node {n}")
    ax.set_xlabel("window")
    ax.set_ylabel("mean queue length")
    ax.legend(fontsize=7)
    return _save(fig, Path(path))


def render(out_dir, s, items) -> list[str]:
    """Draw every requested figure; returns file names relative to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = [network_figure(out / "network.png", s)]
    for item in items:
        kind = item[0]
        if kind == "solution":
            _, model, x = item
            names.append(network_figure(out / "routes.png", s, model, x))
            names.append(rates_figure(out / "rates.png", model.rates(x)))
        elif kind == "rates":
            names.append(rates_figure(out / "rates.png", item[1]))
        elif kind == "convergence":
            names.append(convergence_figure(out / "convergence.png", item[1]))
        elif kind == "consensus":
            names.append(consensus_figure(out / "consensus.png", item[1]))
        elif kind == "budgets":
            names.append(budgets_figure(out / "budgets.png", item[1]))
        elif kind == "queues":
            names.append(queues_figure(out / "queues.png", item[1], item[2]))
    return ["figures/" + n for n in dict.fromkeys(names)]
