"""Independent reference computations shared by unit and acceptance tests."""
import math

import numpy as np

from statroute.channel import ALPHA1, ALPHA2, upper_of_squared
from statroute.model import Y_FLOOR
from statroute.units import KAPPA


def zoom_grid_max(f, dim, n0, n, levels=16, shrink=0.5):
    """Maximize ``f`` over the unit cube by repeated grids shrinking around the incumbent."""
    lo, hi = np.zeros(dim), np.ones(dim)
    a, b, pts = lo.copy(), hi.copy(), n0
    best, best_u = -np.inf, None
    for _ in range(levels):
        grid = np.meshgrid(*[np.linspace(a[k], b[k], pts) for k in range(dim)], indexing="ij")
        v = f(*grid)
        i = np.unravel_index(np.argmax(v), v.shape)
        if v[i] > best:
            best, best_u = float(v[i]), np.array([g[i] for g in grid])
        w = (b - a) * shrink / 2
        a, b = np.maximum(lo, best_u - w), np.minimum(hi, best_u + w)
        pts = n
    return best, best_u


def chain_grid_oracle(m):
    """Best sum rate of a 1-node or 2-node chain by grid search over (mu, P, t).

    Works in the original variables with the bound-based reliabilities:
    outgoing credit uses 1 - Q_upper, the receiver's load uses the upper
    model 1 - alpha1 exp(-alpha2 x^2). Powers are gridded as a fraction of
    the interval between the decodability floor and the largest power the
    remaining PU cap allows, which is a bijection onto the feasible powers.
    """
    eps = m.eps
    floor = m.config.log_floor
    lam_max = 1 - eps - math.exp(floor)
    pts = m.points
    assert len(pts) <= 1
    pt = pts[0] if pts else None
    xf = math.sqrt(Y_FLOOR)

    def margin(lk, P):
        ls = m.ls[lk]
        return (P + ls.m - ls.threshold) / ls.sigma

    def need(n):
        return max(m.ls[lk].threshold - m.ls[lk].m + m.ls[lk].sigma * xf for lk in m.links if lk[0] == n)

    def low(lk, P):
        return 1 - upper_of_squared(margin(lk, P) ** 2)

    def up(lk, P):
        return 1 - ALPHA1 * np.exp(-ALPHA2 * np.maximum(margin(lk, P) ** 2, Y_FLOOR))

    def lam_of(u):
        return np.exp(floor + u * (math.log(lam_max) - floor))

    def power(n, u, lam, room):
        top = np.full_like(u, m.pmax[n])
        member = pt is not None and n in pt.members
        if member:
            g = math.exp(pt.log_gain[n]) / pt.cap_eff
            with np.errstate(divide="ignore", invalid="ignore"):
                top = np.minimum(top, np.log(room / ((lam + eps) * g)) / KAPPA)
        lo = need(n)
        P = np.where(top >= lo, lo + u * (top - lo), np.nan)
        if member:
            room = room - (lam + eps) * np.exp(KAPPA * P) * g
        return P, room

    if len(m.nodes) == 1:
        assert m.links == [(1, 2)]

        def f(ul, up_, t):
            lam = lam_of(ul)
            P, _ = power(1, up_, lam, np.ones_like(ul))
            v = np.minimum(lam * t * low((1, 2), P), 1.0)
            return np.where(np.isfinite(P), v, -np.inf)
        return zoom_grid_max(f, 3, 41, 21)[0]

    assert m.links == [(1, 2), (2, 3)] and m.interf[(2, 3)] == [1] and m.interf[(1, 2)] == []

    def f(u1, p1, t12, u2, p2, t23):
        l1, l2 = lam_of(u1), lam_of(u2)
        P1, room = power(1, p1, l1, np.ones_like(u1))
        P2, _ = power(2, p2, l2, room)
        nu1 = 1 - eps - l1                 # node 1 silent whenever it does not access
        credit1 = l1 * t12 * low((1, 2), P1)
        load2 = l1 * t12 * up((1, 2), P1)
        credit2 = l2 * t23 * nu1 * low((2, 3), P2)
        v = np.minimum(credit1, 1) + np.minimum(credit2 - load2, 1)
        return np.where(np.isfinite(P1) & np.isfinite(P2) & (credit2 - load2 >= 0), v, -np.inf)
    return zoom_grid_max(f, 6, 11, 7)[0]


def q_grid():
    return np.round(np.arange(math.sqrt(2) / 2, 6.0 + 1e-12, 0.01), 12)
