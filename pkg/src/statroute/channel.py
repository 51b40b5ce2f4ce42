"""Link statistics: log-normal SINR moments, Q-function bounds, reliabilities.

The SINR of link n->i is modelled as log-normal; its dB value is Gaussian
with mean ``P_n + m`` and std ``sigma``. Moments are matched in the log
domain: the useful signal's composite gain (path loss x log-normal shadowing
x Nakagami-m) has closed-form log moments, and the noise-plus-PU-interference
denominator is folded in one PU at a time by Gauss quadrature, each partial
sum being re-approximated as log-normal.

CR-to-PU gains are matched on the linear scale instead, so that the average
interference ``exp(kappa*(P + m) + kappa**2 * sigma**2 / 2)`` equals the true
mean exactly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .scenario import Scenario, Topology
from .units import KAPPA

ALPHA1 = 0.28
ALPHA2 = 0.64
X_MIN = math.sqrt(2.0) / 2.0

_GH_NODES, _GH_WEIGHTS = special.roots_hermitenorm(32)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


class QBoundRegionWarning(UserWarning):
    """A Q-function bound was evaluated below its validity floor."""


@dataclass(frozen=True)
class QBoundParams:
    alpha1: float = ALPHA1
    alpha2: float = ALPHA2
    x_min: float = X_MIN


@dataclass(frozen=True)
class LinkStat:
    m: float          # mean SINR offset at 0 dBW (dB)
    sigma: float      # std of the SINR in dB
    threshold: float  # SINR threshold (dB)

    def margin(self, p_dbw):
        return p_dbw + self.m - self.threshold


@dataclass(frozen=True)
class PULinkStat:
    m: float
    sigma: float

    @property
    def log_mean_gain(self) -> float:
        """ln E[g] for the CR-to-PU gain."""
        return KAPPA * self.m + 0.5 * (KAPPA * self.sigma) ** 2


@dataclass(frozen=True)
class ChannelStats:
    links: dict[tuple[int, int], LinkStat]
    pu: dict[tuple[int, int], PULinkStat]   # (node, point id)


# ---------------------------------------------------------------------------
# Gaussian tail and its bounds

def q_function(x):
    """Gaussian tail probability Q(x) = P{Z > x}."""
    return 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))


def _flag_region(x):
    if np.any(np.asarray(x) < X_MIN):
        warnings.warn("Q-bound evaluated below sqrt(2)/2", QBoundRegionWarning, stacklevel=3)


def q_upper_bound(x):
    """(1/12) e^{-x^2/2} + (1/4) e^{-2x^2/3}; valid for x >= sqrt(2)/2."""
    _flag_region(x)
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x**2) / 12.0 + 0.25 * np.exp(-2.0 * x**2 / 3.0)


def q_lower_bound(x):
    """alpha1 * e^{-alpha2 x^2}; valid for x >= sqrt(2)/2."""
    _flag_region(x)
    x = np.asarray(x, dtype=float)
    return ALPHA1 * np.exp(-ALPHA2 * x**2)


def upper_of_squared(y):
    """Q upper bound written in terms of y = x^2 (no region check)."""
    y = np.asarray(y, dtype=float)
    return np.exp(-0.5 * y) / 12.0 + 0.25 * np.exp(-2.0 * y / 3.0)


def lower_of_squared(y):
    return ALPHA1 * np.exp(-ALPHA2 * np.asarray(y, dtype=float))


# ---------------------------------------------------------------------------
# moments

def composite_log_moments(gain_db, shadow_std_db, nakagami_m):
    """Mean and variance of ln(g) for path loss x shadowing x Nakagami-m power."""
    mean = KAPPA * gain_db + special.digamma(nakagami_m) - math.log(nakagami_m)
    var = (KAPPA * shadow_std_db) ** 2 + special.polygamma(1, nakagami_m)
    return float(mean), float(var)


def _gamma_rule(m, k=32):
    x, w = special.roots_genlaguerre(k, m - 1.0)
    return x / m, w / w.sum()


def denominator_log_moments(noise_w, interferers_db, shadow_std_db, nakagami_m):
    """Log-moments of noise + sum of composite PU interference terms.

    ``interferers_db`` holds the mean-path-loss received PU powers (dBW).
    """
    mu, var = math.log(noise_w), 0.0
    if not len(interferers_db):
        return mu, var
    gx, gw = _gamma_rule(nakagami_m)
    z = _GH_NODES
    w2 = _GH_WEIGHTS[:, None, None] * _GH_WEIGHTS[None, :, None] * gw[None, None, :]
    for p_db in interferers_db:
        part = np.exp(mu + math.sqrt(var) * z)[:, None, None]
        term = np.exp(KAPPA * p_db + KAPPA * shadow_std_db * z)[None, :, None] * gx[None, None, :]
        v = np.log(part + term)
        mu = float((w2 * v).sum())
        var = float((w2 * (v - mu) ** 2).sum())
    return mu, var


def link_stat(s: Scenario, n: int, i: int) -> LinkStat:
    mu_g, var_g = composite_log_moments(s.pathloss_db(s.distance(n, i)), s.shadow_std_db, s.nakagami_m)
    interferers = [pu.power_dbw + s.pathloss_db(s.pu_distance(pu, i)) for pu in s.active_pus]
    noise = s.noise(i)
    if not noise > 0:
        raise ValueError(f"non-positive noise power at node {i}")
    mu_d, var_d = denominator_log_moments(noise, interferers, s.shadow_std_db, s.nakagami_m)
    return LinkStat(m=(mu_g - mu_d) / KAPPA, sigma=math.sqrt(var_g + var_d) / KAPPA,
                    threshold=s.threshold(n, i))


def pu_link_stat(s: Scenario, point, n: int) -> PULinkStat:
    sh = KAPPA * s.shadow_std_db
    log_mean = KAPPA * s.pathloss_db(s.point_distance(point, n)) + 0.5 * sh**2
    var = sh**2 + math.log1p(1.0 / s.nakagami_m)
    return PULinkStat(m=(log_mean - 0.5 * var) / KAPPA, sigma=math.sqrt(var) / KAPPA)


def fenton_wilkinson_link_stats(s: Scenario, t: Topology) -> ChannelStats:
    """Per-link SINR statistics and per CR-to-PU-point gain statistics."""
    links = {(n, i): link_stat(s, n, i) for (n, i) in t.links}
    pu = {}
    for pt in s.protected_points:
        for n in range(1, s.n_nodes + 1):
            pu[(n, pt.id)] = pu_link_stat(s, pt, n)
    return ChannelStats(links=links, pu=pu)


def perturb_stats(stats: ChannelStats, s: Scenario, seed: int, std_db: float = 3.0) -> ChannelStats:
    """One static shadowing realization added to the CR link mean gains.

    Offsets are reciprocal (one draw per unordered CR pair) and depend only on
    ``seed`` and the node ids, so runs with different PU activity but the same
    seed see the same channels. CR-to-PU statistics are left alone: the cap
    bounds interference averaged over shadowing, which they already encode.
    """
    rng = np.random.default_rng(seed)
    size = s.n_nodes + 1
    pair = rng.normal(0.0, std_db, (size, size))
    pair = np.triu(pair, 1) + np.triu(pair, 1).T
    links = {(n, i): LinkStat(ls.m + float(pair[n - 1, i - 1]), ls.sigma, ls.threshold)
             for (n, i), ls in stats.links.items()}
    return ChannelStats(links=links, pu=dict(stats.pu))


def sample_sinr_db(s: Scenario, n: int, i: int, p_dbw: float, n_draws: int, seed: int) -> np.ndarray:
    """Monte-Carlo draws of 10 log10 of the SINR (direct simulation)."""
    rng = np.random.default_rng(seed)
    m = s.nakagami_m

    def composite(gain_db):
        shadow = np.exp(KAPPA * s.shadow_std_db * rng.standard_normal(n_draws))
        fading = rng.gamma(m, 1.0 / m, n_draws)
        return math.exp(KAPPA * gain_db) * shadow * fading

    signal = math.exp(KAPPA * p_dbw) * composite(s.pathloss_db(s.distance(n, i)))
    denom = np.full(n_draws, s.noise(i))
    for pu in s.active_pus:
        denom = denom + math.exp(KAPPA * pu.power_dbw) * composite(s.pathloss_db(s.pu_distance(pu, i)))
    return 10.0 * np.log10(signal / denom)


# ---------------------------------------------------------------------------
# reliabilities and interference

def link_reliability(p_dbw, ls: LinkStat, silence_probs=()):
    """Probability that a packet sent at power ``p_dbw`` is decoded.

    ``silence_probs`` are the probabilities that each potential colliding
    node stays silent. With ``sigma == 0`` the SINR term is a step function.
    """
    nu = np.asarray(list(silence_probs), dtype=float)
    if np.any((nu <= 0) | (nu > 1)):
        raise ValueError("silence probabilities must lie in (0, 1]")
    collision_free = float(np.prod(nu)) if nu.size else 1.0
    if ls.sigma == 0:
        return collision_free * float(ls.margin(p_dbw) > 0)
    return collision_free * float(q_function((ls.threshold - p_dbw - ls.m) / ls.sigma))


def pu_interference(mu, p_dbw, m_r, sigma_r):
    """Average interference (W) at one PU point from the listed CR nodes."""
    mu = np.asarray(mu, dtype=float)
    p = np.asarray(p_dbw, dtype=float)
    m = np.asarray(m_r, dtype=float)
    sg = np.asarray(sigma_r, dtype=float)
    return float(np.sum(mu * np.exp(KAPPA * p + KAPPA * m + 0.5 * (KAPPA * sg) ** 2)))
