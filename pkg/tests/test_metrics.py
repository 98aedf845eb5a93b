import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from loadcast.metrics import (ScoreReport, coverage, crps_gaussian, gaussian_interval, interval_score,
                              magnitude, mape, score_forecast, shape, skill, timing_final, timing_qual,
                              timing_weight)


def crps_numeric(mu, sigma, y):
    """Direct quadrature of the integral of (F(x) - 1{x >= y})^2."""
    F = lambda x: stats.norm.cdf(x, mu, sigma)
    lo, hi = mu - 12 * sigma, mu + 12 * sigma
    a = integrate.quad(lambda x: F(x) ** 2, min(lo, y), y, epsabs=1e-12, limit=200)[0] if y > lo else 0.0
    b = integrate.quad(lambda x: (1 - F(x)) ** 2, y, max(hi, y), epsabs=1e-12, limit=200)[0]
    if y <= lo:
        a = 0.0
    return a + b


def test_mape():
    assert mape([100, 200], [100, 200]) == 0.0
    assert mape([100, 200], [110, 180]) == pytest.approx(10.0, abs=1e-12)
    with pytest.raises(ValueError):
        mape([0, 1], [1, 1])
    with pytest.raises(ValueError):
        mape([1, 2], [1])


def test_magnitude():
    assert magnitude([100.0], [90.0]) == pytest.approx(10.0)
    assert magnitude([5.0, 6.0], [5.0, 6.0]) == 0.0


def test_timing_qual_examples():
    assert timing_qual([18], [20]) == 2.0
    assert timing_qual([5, 5], [5, 5]) == 0.0
    assert timing_qual([3, 7], [3, 3]) == 2.0
    with pytest.raises(ValueError):
        timing_qual([0], [1])


def test_timing_final_weights():
    assert timing_weight(1) == 1 and timing_weight(3) == 6 and timing_weight(7) == 10
    assert timing_weight(0) == 0 and timing_weight(-4) == 8 and timing_weight(5) == 10
    assert timing_final([10, 10], [11, 15]) == 5.5
    with pytest.raises(ValueError):
        timing_final([25], [1])


def test_timing_final_dominates_mae_up_to_cap():
    # the flat cost of 10 caps the weight, so dominance only holds for |d| <= 10
    d = np.arange(-10, 11)
    assert np.all(timing_weight(d) >= np.abs(d))
    assert timing_weight(11) < 11


def test_shape_examples(rng):
    y = rng.uniform(1, 2, 24)
    assert shape(y, y) == 0.0
    assert shape(y, 3.7 * y) == pytest.approx(0.0, abs=1e-12)
    # forecast profile lowered by 0.1 at the 5 hours around the actual peak
    y = np.linspace(0.5, 0.7, 24)
    y[11] = 1.0
    f = y.copy()
    f[9:14] -= 0.1
    f[11] = 1.0  # keep the forecast max at 1
    expect = np.sum(np.abs(y[9:14] - f[9:14]))
    assert shape(y, f) == pytest.approx(expect)
    g = y.copy()
    for h in (9, 10, 12, 13):
        g[h] -= 0.1
    g2 = np.r_[g, g]
    assert shape(np.r_[y, y], g2) == pytest.approx(0.4)


def test_shape_window_clipped_at_day_edges():
    y = np.full(24, 0.5)
    y[0] = 1.0
    f = np.full(24, 0.4)
    f[0] = 1.0
    # window hours 1..3 only: 0 + 0.1 + 0.1
    assert shape(y, f) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        shape(np.zeros(24), np.ones(24))


def test_crps_closed_form_values():
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.2336949772, abs=1e-9)
    assert crps_gaussian(0.0, 1.0, 2.0) == pytest.approx(1.45279, abs=5e-6)
    assert crps_gaussian(0.0, 1.0, 2.0) == pytest.approx(crps_numeric(0.0, 1.0, 2.0), abs=1e-8)
    assert crps_gaussian(3.0, 2.0, 3.0) == pytest.approx(2 * 0.2336949772, abs=1e-9)
    assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(crps_numeric(0.0, 1.0, 0.0), abs=1e-8)
    with pytest.raises(ValueError):
        crps_gaussian(0.0, 0.0, 1.0)


def test_interval_score_examples():
    assert interval_score(0, 10, 5) == 10
    assert interval_score(0, 10, -1, 0.1) == pytest.approx(30)
    assert interval_score(0, 10, 12, 0.1) == pytest.approx(50)
    with pytest.raises(ValueError):
        interval_score(1, 0, 0)
    assert coverage([0, 0], [1, 1], [1, 2]) == 50.0


def test_skill_examples():
    assert skill(5.0, 5.0) == 0.0
    assert skill(6.35, 6.03) == pytest.approx(5.16, abs=0.01)
    assert skill(10, 5) == pytest.approx(66.6667, abs=1e-3)
    with pytest.raises(ValueError):
        skill(1, -1)


def test_gaussian_interval():
    lo, hi = gaussian_interval((np.array([0.0]), np.array([1.0])))
    assert lo[0] == pytest.approx(-1.6448536269514722, abs=1e-12)
    assert hi[0] == pytest.approx(stats.norm.ppf(0.95), abs=1e-12)
    lo, hi = gaussian_interval((np.array([2.0]), np.array([1e-300])))
    assert lo[0] == hi[0] == 2.0


def test_interval_score_prefers_true_interval():
    rng = np.random.default_rng(0)
    y = rng.normal(0, 1, 200_000)
    z = stats.norm.ppf(0.95)
    scores = {c: interval_score(-c * z, c * z, y).mean() for c in (0.7, 1.0, 1.4)}
    se = interval_score(-z, z, y).std() / math.sqrt(y.size)
    assert scores[1.0] < scores[0.7] - 3 * se
    assert scores[1.0] < scores[1.4] - 3 * se


def test_score_forecast_identical_is_perfect():
    y = 100 + np.sin(np.arange(48))
    rep = score_forecast(y, y, np.zeros(48))
    assert rep.mape_h == rep.magnitude == rep.timing_qual == rep.timing_final == rep.shape == 0
    assert rep.crps_mean == 0 and rep.interval_score_mean == 0 and rep.coverage_pct == 100
    ref = score_forecast(y, y + 1, np.ones(48))
    rep2 = score_forecast(y, y + 0.5, np.ones(48), reference=ref)
    assert rep2.skill["mape_h"] > 0 and "coverage_pct" not in rep2.skill
    assert set(rep2.as_row()) >= {"mape_h", "crps_mean", "skill_mape_h"}
    assert '"mape_h"' in rep2.to_json()


@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50), st.floats(0.05, 20), st.floats(-8, 8), st.floats(0.1, 10))
def test_crps_homogeneity(mu, sigma, z, c):
    y = mu + z * sigma
    a = crps_gaussian(mu, sigma, y)
    b = crps_gaussian(c * mu, c * sigma, c * y)
    assert b == pytest.approx(c * a, rel=1e-9, abs=1e-12)
    assert a >= 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.1, 100), min_size=24, max_size=24), st.floats(0.01, 100))
def test_shape_scale_invariance(day, c):
    day = np.array(day)
    f = day[::-1].copy()
    assert shape(day, c * f) == pytest.approx(shape(day, f), abs=1e-9)
    assert shape(c * day, f) == pytest.approx(shape(day, f), abs=1e-9)
