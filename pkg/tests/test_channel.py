import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from statroute import channel
from statroute.channel import (ALPHA1, ALPHA2, X_MIN, LinkStat, QBoundRegionWarning, composite_log_moments,
                               denominator_log_moments, link_reliability, perturb_stats, q_function,
                               q_lower_bound, q_upper_bound, sample_sinr_db)
from statroute.units import KAPPA, db_to_lin, lin_to_db

from conftest import make_model


@settings(max_examples=300, deadline=None)
@given(st.floats(min_value=X_MIN, max_value=12.0))
def test_q_sandwich(x):
    q = float(stats.norm.sf(x))
    assert float(q_lower_bound(x)) <= q <= float(q_upper_bound(x))


def test_q_function_matches_scipy():
    x = np.linspace(-5, 8, 200)
    np.testing.assert_allclose(q_function(x), stats.norm.sf(x), rtol=1e-12, atol=0)


def test_bounds_below_floor_warn():
    with pytest.warns(QBoundRegionWarning):
        q_upper_bound(0.5)
    with pytest.warns(QBoundRegionWarning):
        q_lower_bound(np.array([0.2, 1.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        q_upper_bound(X_MIN)


def test_squared_forms_agree():
    x = np.linspace(X_MIN, 5, 50)
    np.testing.assert_allclose(channel.upper_of_squared(x**2), q_upper_bound(x))
    np.testing.assert_allclose(channel.lower_of_squared(x**2), q_lower_bound(x))
    assert (ALPHA1, ALPHA2) == (0.28, 0.64)


def test_composite_moments_monte_carlo():
    rng = np.random.default_rng(3)
    n = 400_000
    for m in (0.5, 1.0, 3.0):
        g = db_to_lin(-70.0 + 6.0 * rng.standard_normal(n)) * rng.gamma(m, 1.0 / m, n)
        mean, var = composite_log_moments(-70.0, 6.0, m)
        assert abs(np.log(g).mean() - mean) < 0.01
        assert abs(np.log(g).var() - var) / var < 0.01


def test_denominator_noise_only():
    assert denominator_log_moments(1e-8, [], 6.0, 1.0) == (math.log(1e-8), 0.0)


def _denominator_draws(interferers, n, seed):
    rng = np.random.default_rng(seed)
    tot = np.full(n, 1e-8)
    for p in interferers:
        tot += db_to_lin(p + 6.0 * rng.standard_normal(n)) * rng.gamma(1.0, 1.0, n)
    return np.log(tot)


def test_denominator_single_interferer_is_exact():
    ln = _denominator_draws([-75.0], 400_000, 5)
    mu, var = denominator_log_moments(1e-8, [-75.0], 6.0, 1.0)
    assert abs(ln.mean() - mu) < 0.01
    assert abs(ln.var() - var) / var < 0.01


def test_denominator_two_interferers_mean():
    # the partial sum is re-approximated as log-normal, so only the mean is tight
    ln = _denominator_draws([-75.0, -82.0], 400_000, 6)
    mu, var = denominator_log_moments(1e-8, [-75.0, -82.0], 6.0, 1.0)
    assert abs(ln.mean() - mu) < 0.02
    assert abs(ln.var() - var) / var < 0.15


def test_link_ccdf_close_to_simulation(test1_scenario, test1_model):
    """Log-normal model vs direct simulation of the SINR, a few links at a few powers."""
    s = test1_scenario
    for k, (n, i) in enumerate(test1_model.links[:5]):
        ls = test1_model.ls[(n, i)]
        for p in (-10.0, 0.0):
            draws = sample_sinr_db(s, n, i, p, 200_000, seed=10 * k + int(-p))
            mc = float(np.mean(draws > ls.threshold))
            model = float(q_function((ls.threshold - p - ls.m) / ls.sigma))
            assert abs(mc - model) < 0.02, (n, i, p, mc, model)


def test_pu_gain_mean_is_exact(test1_scenario):
    s = test1_scenario
    pt = s.protected_points[0]
    ps = channel.pu_link_stat(s, pt, 3)
    expected = KAPPA * s.pathloss_db(s.point_distance(pt, 3)) + 0.5 * (KAPPA * s.shadow_std_db) ** 2
    assert math.isclose(ps.log_mean_gain, expected, rel_tol=1e-12)


def test_reliability_cases():
    ls = LinkStat(m=5.0, sigma=0.0, threshold=0.0)
    assert link_reliability(-4.0, ls) == 1.0
    assert link_reliability(-6.0, ls) == 0.0
    ls = LinkStat(m=0.0, sigma=4.0, threshold=0.0)
    assert math.isclose(link_reliability(0.0, ls, [0.5, 0.8]), 0.5 * 0.5 * 0.8)
    with pytest.raises(ValueError):
        link_reliability(0.0, ls, [0.0])


def test_pu_interference_linear_sum():
    v = channel.pu_interference([0.5, 0.2], [0.0, -10.0], [-80.0, -90.0], [0.0, 0.0])
    assert math.isclose(v, 0.5 * 1e-8 + 0.2 * 1e-1 * 1e-9)


def test_db_conversions():
    x = np.array([1e-9, 1.0, 123.0])
    np.testing.assert_allclose(db_to_lin(lin_to_db(x)), x)
    with pytest.raises(ValueError):
        lin_to_db(0.0)


def test_perturbation_is_seeded_reciprocal_and_activity_independent(test1_scenario, test2_scenario, test1_model):
    m2 = make_model(test2_scenario)
    a = perturb_stats(test1_model.stats, test1_scenario, 11)
    b = perturb_stats(test1_model.stats, test1_scenario, 11)
    c = perturb_stats(m2.stats, test2_scenario, 11)
    assert a == b
    d1 = {lk: a.links[lk].m - test1_model.stats.links[lk].m for lk in a.links}
    d2 = {lk: c.links[lk].m - m2.stats.links[lk].m for lk in c.links}
    for lk, v in d1.items():
        assert math.isclose(v, d2[lk], abs_tol=1e-12)
        rev = lk[::-1]
        if rev in d1:
            assert math.isclose(v, d1[rev], abs_tol=1e-12)
    assert perturb_stats(test1_model.stats, test1_scenario, 12) != a
    assert a.pu == test1_model.stats.pu
