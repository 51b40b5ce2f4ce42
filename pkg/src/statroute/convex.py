"""Small dense convex programs and a log-barrier interior-point solver.

A :class:`ConvexProgram` minimizes a separable convex objective subject to
box bounds and families of smooth convex inequality rows ``g(x) <= 0``.
Each family exposes ``value``, ``jacobian`` and ``hess_sum`` (the weighted
sum of row Hessians), which is all the Newton step needs. Problems here have
at most a few hundred variables, so everything is dense.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# constraint families

class AffineRows:
    """``G x + h <= 0``."""

    def __init__(self, G, h, names: Sequence[str], label="affine"):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        self.h = np.asarray(h, dtype=float).reshape(-1)
        self.names = list(names)
        self.label = label

    def __len__(self):
        return len(self.h)

    def value(self, x):
        return self.G @ x + self.h

    def jacobian(self, x):
        return self.G

    def hess_sum(self, x, w):
        return np.zeros((x.size, x.size))

    def with_slack(self):
        G = np.hstack([self.G, -np.ones((len(self), 1))])
        return AffineRows(G, self.h, self.names, self.label)


class ExpRows:
    """Rows ``sum_k c_k exp(a_k.x + b_k) + l.x + d <= 0`` with ``c_k > 0``.

    Term ``k`` belongs to row ``term_row[k]``.
    """

    def __init__(self, term_row, coef, A, b, L, d, names: Sequence[str], label="exp"):
        self.term_row = np.asarray(term_row, dtype=int)
        self.coef = np.asarray(coef, dtype=float)
        self.A = np.asarray(A, dtype=float).reshape(len(self.coef), -1)
        self.b = np.asarray(b, dtype=float)
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.d = np.asarray(d, dtype=float).reshape(-1)
        self.names = list(names)
        self.label = label
        if np.any(self.coef <= 0):
            raise ValueError("exponential terms need positive coefficients to stay convex")
        m = len(self.d)
        self._R = np.zeros((m, len(self.coef)))
        self._R[self.term_row, np.arange(len(self.coef))] = 1.0

    def __len__(self):
        return len(self.d)

    def _terms(self, x):
        return self.coef * np.exp(self.A @ x + self.b)

    def value(self, x):
        return self._R @ self._terms(x) + self.L @ x + self.d

    def jacobian(self, x):
        return self._R @ (self._terms(x)[:, None] * self.A) + self.L

    def hess_sum(self, x, w):
        e = self._terms(x) * np.asarray(w)[self.term_row]
        return (self.A * e[:, None]).T @ self.A

    def with_slack(self):
        A = np.hstack([self.A, np.zeros((len(self.coef), 1))])
        L = np.hstack([self.L, -np.ones((len(self), 1))])
        return ExpRows(self.term_row, self.coef, A, self.b, L, self.d, self.names, self.label)


class SqrtRows:
    """Rows ``l.x + d - s * sqrt(x[j]) <= 0`` with ``s >= 0`` (convex)."""

    def __init__(self, L, d, index, scale, names: Sequence[str], label="sqrt"):
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.d = np.asarray(d, dtype=float).reshape(-1)
        self.index = np.asarray(index, dtype=int)
        self.scale = np.asarray(scale, dtype=float)
        self.names = list(names)
        self.label = label
        if np.any(self.scale < 0):
            raise ValueError("sqrt rows need a nonnegative scale")

    def __len__(self):
        return len(self.d)

    def value(self, x):
        return self.L @ x + self.d - self.scale * np.sqrt(x[self.index])

    def jacobian(self, x):
        J = self.L.copy()
        J[np.arange(len(self)), self.index] -= 0.5 * self.scale / np.sqrt(x[self.index])
        return J

    def hess_sum(self, x, w):
        H = np.zeros((x.size, x.size))
        np.add.at(H, (self.index, self.index), np.asarray(w) * 0.25 * self.scale * x[self.index] ** -1.5)
        return H

    def with_slack(self):
        L = np.hstack([self.L, -np.ones((len(self), 1))])
        return SqrtRows(L, self.d, self.index, self.scale, self.names, self.label)


class CallbackRows:
    """Generic smooth convex rows given by callbacks.

    ``value(x) -> (m,)``, ``jacobian(x) -> (m, n)``, ``hess_sum(x, w) -> (n, n)``.
    """

    def __init__(self, value, jacobian, hess_sum, names, label="callback"):
        self._value, self._jac, self._hess = value, jacobian, hess_sum
        self.names = list(names)
        self.label = label

    def __len__(self):
        return len(self.names)

    def value(self, x):
        return np.asarray(self._value(x), dtype=float)

    def jacobian(self, x):
        return np.asarray(self._jac(x), dtype=float)

    def hess_sum(self, x, w):
        return np.asarray(self._hess(x, w), dtype=float)

    def with_slack(self):
        v, j, h = self._value, self._jac, self._hess

        def value(z):
            return np.asarray(v(z[:-1])) - z[-1]

        def jac(z):
            J = np.asarray(j(z[:-1]))
            return np.hstack([J, -np.ones((J.shape[0], 1))])

        def hess(z, w):
            H = np.zeros((z.size, z.size))
            H[:-1, :-1] = h(z[:-1], w)
            return H

        return CallbackRows(value, jac, hess, self.names, self.label)


# ---------------------------------------------------------------------------
# objective

@dataclass
class ScalarFn:
    """Scalar function with first and second derivative (vectorized)."""
    f: Callable
    df: Callable
    d2f: Callable


LINEAR = ScalarFn(lambda r: r, lambda r: np.ones_like(r), lambda r: np.zeros_like(r))


@dataclass
class Objective:
    """``c.x + 0.5 * sum_i h_i x_i^2 + sum_k phi_k(x[idx_k]) + const`` (minimized).

    ``phi_k`` must be convex.
    """
    c: np.ndarray
    h: np.ndarray | None = None
    terms: list[tuple[int, ScalarFn]] = field(default_factory=list)
    const: float = 0.0

    def value(self, x):
        v = float(self.c @ x) + self.const
        if self.h is not None:
            v += 0.5 * float(self.h @ (x * x))
        for idx, fn in self.terms:
            v += float(fn.f(x[idx]))
        return v

    def gradient(self, x):
        g = self.c.astype(float).copy()
        if self.h is not None:
            g += self.h * x
        for idx, fn in self.terms:
            g[idx] += fn.df(x[idx])
        return g

    def hessian(self, x):
        H = np.zeros((x.size, x.size))
        if self.h is not None:
            H[np.diag_indices(x.size)] += self.h
        for idx, fn in self.terms:
            H[idx, idx] += fn.d2f(x[idx])
        return H

    def with_slack(self):
        return Objective(np.append(self.c, 0.0), None if self.h is None else np.append(self.h, 0.0),
                         list(self.terms), self.const)


@dataclass
class ConvexProgram:
    names: list[str]
    objective: Objective
    constraints: list
    lower: np.ndarray
    upper: np.ndarray

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return sum(len(f) for f in self.constraints)

    def row_values(self, x) -> dict[str, np.ndarray]:
        return {f.label: f.value(x) for f in self.constraints}

    def max_violation(self, x) -> float:
        v = [np.max(f.value(x)) for f in self.constraints if len(f)]
        v.append(np.max(self.lower - x, initial=-np.inf))
        v.append(np.max(x - self.upper, initial=-np.inf))
        return float(max(v))


@dataclass
class KKTResidual:
    stationarity: float
    primal_feasibility: float
    dual_feasibility: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal_feasibility, self.dual_feasibility, self.complementarity)


@dataclass
class SolveReport:
    status: str                      # optimal | infeasible | max-iter
    x: np.ndarray
    objective: float
    multipliers: dict[str, np.ndarray]
    kkt: KKTResidual
    newton_steps: int
    barrier_iterations: int
    objective_path: list[float] = field(default_factory=list)
    interior: np.ndarray | None = None   # centered point with comfortable slack, for warm starts

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


# ---------------------------------------------------------------------------
# solver

def _box_masks(p):
    return np.isfinite(p.lower), np.isfinite(p.upper)


def _strictly_feasible(p, x):
    lo, up = _box_masks(p)
    if np.any(x[lo] <= p.lower[lo]) or np.any(x[up] >= p.upper[up]):
        return False
    for f in p.constraints:
        if len(f):
            v = f.value(x)
            if not np.all(np.isfinite(v)) or np.any(v >= 0):
                return False
    return True


def _barrier_value(p, x, t):
    """Barrier function at ``x``; ``inf`` outside the strict interior."""
    lo, up = _box_masks(p)
    dl = x[lo] - p.lower[lo]
    du = p.upper[up] - x[up]
    if np.any(dl <= 0) or np.any(du <= 0):
        return np.inf
    val = t * p.objective.value(x) - np.sum(np.log(dl)) - np.sum(np.log(du))
    for f in p.constraints:
        if len(f):
            g = f.value(x)
            if not np.all(g < 0):
                return np.inf
            val -= np.sum(np.log(-g))
    return val


def _newton_system(p, x, t):
    lo, up = _box_masks(p)
    grad = t * p.objective.gradient(x)
    H = t * p.objective.hessian(x)
    dl = np.zeros_like(x)
    du = np.zeros_like(x)
    dl[lo] = x[lo] - p.lower[lo]
    du[up] = p.upper[up] - x[up]
    grad[lo] -= 1.0 / dl[lo]
    grad[up] += 1.0 / du[up]
    diag = np.zeros_like(x)
    diag[lo] += dl[lo] ** -2
    diag[up] += du[up] ** -2
    H[np.diag_indices(x.size)] += diag
    for f in p.constraints:
        if not len(f):
            continue
        g = f.value(x)
        J = f.jacobian(x)
        inv = -1.0 / g
        grad += J.T @ inv
        H += f.hess_sum(x, inv) + (J * (inv**2)[:, None]).T @ J
    return grad, H


def _solve_newton(H, grad):
    scale = np.sqrt(np.maximum(np.abs(np.diag(H)), 1e-300))
    Hs = H / scale[:, None] / scale[None, :]
    gs = grad / scale
    try:
        dx = -np.linalg.solve(Hs, gs)
    except np.linalg.LinAlgError:
        dx = -np.linalg.lstsq(Hs + 1e-12 * np.eye(len(gs)), gs, rcond=None)[0]
    return dx / scale


def _multipliers(p, x, t):
    lo, up = _box_masks(p)
    mult = {f.label: -1.0 / (t * f.value(x)) if len(f) else np.zeros(0) for f in p.constraints}
    ml = np.zeros_like(x)
    mu = np.zeros_like(x)
    ml[lo] = 1.0 / (t * (x[lo] - p.lower[lo]))
    mu[up] = 1.0 / (t * (p.upper[up] - x[up]))
    mult["lower"] = ml
    mult["upper"] = mu
    return mult


def _polish_multipliers(p, x, mult, rel=1e-4):
    """Re-fit the duals of near-active rows by nonnegative least squares.

    Barrier duals ``1/(t g)`` carry round-off of order ``eps/|g|``; refitting
    the significant ones against the stationarity equation removes it while
    leaving the tiny duals of inactive rows untouched.
    """
    cols, keys = [], []
    rest = p.objective.gradient(x).copy()
    scale = max((float(np.max(v, initial=0.0)) for v in mult.values()), default=0.0)
    for f in p.constraints:
        if not len(f):
            continue
        lam = mult[f.label]
        J = f.jacobian(x)
        active = lam >= rel * scale
        rest += J[~active].T @ lam[~active]
        for r in np.flatnonzero(active):
            cols.append(J[r])
            keys.append((f.label, r))
    for side, sign in (("lower", -1.0), ("upper", 1.0)):
        lam = mult[side]
        active = lam >= rel * scale
        rest += sign * np.where(active, 0.0, lam)
        for r in np.flatnonzero(active):
            e = np.zeros_like(x)
            e[r] = sign
            cols.append(e)
            keys.append((side, r))
    if not cols:
        return mult
    A = np.array(cols).T
    colscale = np.maximum(np.linalg.norm(A, axis=0), 1e-300)
    lam_new, _ = optimize.nnls(A / colscale, -rest, maxiter=50 * len(cols))
    lam_new = lam_new / colscale
    out = {k: v.copy() for k, v in mult.items()}
    trial = {k: v.copy() for k, v in mult.items()}
    for (label, r), v in zip(keys, lam_new):
        trial[label][r] = v
    if check_kkt(p, x, trial).max <= check_kkt(p, x, out).max:
        return trial
    return out


def check_kkt(p: ConvexProgram, x, multipliers) -> KKTResidual:
    """Residuals of the KKT conditions at ``x`` with the given multipliers."""
    x = np.asarray(x, dtype=float)
    grad = p.objective.gradient(x)
    feas = 0.0
    comp = 0.0
    dual = 0.0
    for f in p.constraints:
        if not len(f):
            continue
        lam = np.asarray(multipliers[f.label], dtype=float)
        g = f.value(x)
        grad = grad + f.jacobian(x).T @ lam
        feas = max(feas, float(np.max(g, initial=0.0)))
        comp = max(comp, float(np.max(np.abs(lam * g), initial=0.0)))
        dual = max(dual, float(np.max(-lam, initial=0.0)))
    lo, up = _box_masks(p)
    ml = np.asarray(multipliers.get("lower", np.zeros_like(x)), dtype=float)
    mu = np.asarray(multipliers.get("upper", np.zeros_like(x)), dtype=float)
    grad = grad - ml + mu
    feas = max(feas, float(np.max(p.lower[lo] - x[lo], initial=0.0)), float(np.max(x[up] - p.upper[up], initial=0.0)))
    comp = max(comp, float(np.max(np.abs(ml[lo] * (x[lo] - p.lower[lo])), initial=0.0)),
               float(np.max(np.abs(mu[up] * (p.upper[up] - x[up])), initial=0.0)))
    dual = max(dual, float(np.max(-ml, initial=0.0)), float(np.max(-mu, initial=0.0)))
    return KKTResidual(stationarity=float(np.max(np.abs(grad), initial=0.0)),
                       primal_feasibility=feas, dual_feasibility=dual, complementarity=comp)


def _box_step(p, x, dx):
    """Largest step keeping ``x + s dx`` inside the box."""
    lo, up = _box_masks(p)
    s = np.inf
    dn = lo & (dx < 0)
    if np.any(dn):
        s = min(s, float(np.min((p.lower[dn] - x[dn]) / dx[dn])))
    upm = up & (dx > 0)
    if np.any(upm):
        s = min(s, float(np.min((p.upper[upm] - x[upm]) / dx[upm])))
    return s


def _center(p, x, t, max_newton, newton_tol, stop=None):
    """Damped Newton minimization of the barrier function at parameter ``t``."""
    steps = 0
    creep = 0
    for _ in range(max_newton):
        grad, H = _newton_system(p, x, t)
        dx = _solve_newton(H, grad)
        dec2 = -float(grad @ dx)
        if dec2 / 2.0 <= newton_tol:
            break
        f0 = _barrier_value(p, x, t)
        step = min(1.0, 0.99 * _box_step(p, x, dx))
        accepted = False
        while step > 1e-14:
            xn = x + step * dx
            if _barrier_value(p, xn, t) <= f0 - 0.01 * step * dec2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # round-off can hide the Armijo decrease near the center: take the
            # pure Newton step if it is feasible and shrinks the gradient
            xn = x + dx
            if dec2 < 1e-6 and _strictly_feasible(p, xn):
                gn, _ = _newton_system(p, xn, t)
                if np.max(np.abs(gn)) < 0.5 * np.max(np.abs(grad)):
                    x = xn
                    steps += 1
                    continue
            break
        # ill-conditioned Newton systems can creep forever at round-off scale
        creep = creep + 1 if np.max(np.abs(xn - x)) < 1e-10 * (1.0 + np.max(np.abs(x))) else 0
        x = xn
        steps += 1
        if stop is not None and stop(x):
            break
        if creep >= 3:
            break
    return x, steps


def _phase_one(p: ConvexProgram, x0, tol):
    """Find a strictly feasible point by minimizing the max row violation."""
    lo, up = _box_masks(p)
    x = np.array(x0, dtype=float)
    # pull the start strictly inside the box
    width = np.where(lo & up, p.upper - p.lower, 1.0)
    x[lo] = np.maximum(x[lo], p.lower[lo] + 1e-3 * width[lo])
    x[up] = np.minimum(x[up], p.upper[up] - 1e-3 * width[up])
    if _strictly_feasible(p, x):
        return x
    worst = max((np.max(f.value(x)) for f in p.constraints if len(f)), default=-1.0)
    s0 = max(worst, 0.0) + 1.0
    cons = [f.with_slack() for f in p.constraints]
    obj = Objective(np.append(np.zeros(p.n), 1.0))
    aux = ConvexProgram(p.names + ["_phase1_slack"], obj, cons,
                        np.append(p.lower, -1.0), np.append(p.upper, np.inf))
    z = np.append(x, s0)
    m = aux.n_rows + int(np.sum(np.isfinite(aux.lower))) + int(np.sum(np.isfinite(aux.upper)))
    t = 1.0
    for _ in range(60):
        z, _ = _center(aux, z, t, 80, 1e-10, stop=lambda zz: zz[-1] < -1e-6)
        if z[-1] < 0 and _strictly_feasible(p, z[:-1]):
            return z[:-1]
        if m / t < tol:
            break
        t *= 10.0
    raise SolverError(f"phase I: no strictly feasible point (min violation {z[-1]:.3e})")


def solve(p: ConvexProgram, start, tol: float = 1e-8, t0: float = 1.0, mu: float = 20.0,
          max_newton: int = 100, max_outer: int = 60) -> SolveReport:
    """Barrier path-following solve of ``p`` from ``start``.

    A phase-I search runs first when ``start`` is not strictly feasible. The
    returned multipliers are the barrier duals ``-1/(t g)``; on ``optimal``
    status the KKT residual is at most ``tol`` scaled by the row count.
    """
    x = np.asarray(start, dtype=float).copy()
    if not _strictly_feasible(p, x):
        try:
            x = _phase_one(p, x, min(tol, 1e-15))
        except SolverError:
            return SolveReport("infeasible", x, float("nan"), {}, KKTResidual(np.inf, np.inf, np.inf, np.inf), 0, 0)
    m = p.n_rows + int(np.sum(np.isfinite(p.lower))) + int(np.sum(np.isfinite(p.upper)))
    t = t0
    total = 0
    path = []
    status = "max-iter"
    mult, kkt, best, extra = {}, None, None, 0
    interior = x.copy()
    for outer in range(1, max_outer + 1):
        x, steps = _center(p, x, t, max_newton, 1e-9)
        total += steps
        if m / t >= 1e-3:
            interior = x.copy()
        path.append(p.objective.value(x))
        log.debug("barrier t=%.3g f0=%.10g newton=%d", t, path[-1], steps)
        if m / t < tol:
            cand = _polish_multipliers(p, x, _multipliers(p, x, t))
            ck = check_kkt(p, x, cand)
            if kkt is None or ck.max < kkt.max:
                best, mult, kkt = x.copy(), cand, ck
            if kkt.max <= tol:
                status = "optimal"
                break
            extra += 1
            if extra > 3:
                x = best
                break
        t *= mu
    if kkt is None:
        mult = _polish_multipliers(p, x, _multipliers(p, x, t))
        kkt = check_kkt(p, x, mult)
    return SolveReport(status, x, p.objective.value(x), mult, kkt, total, outer, path, interior)
