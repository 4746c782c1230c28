from __future__ import annotations

import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import gaussian_kde

from conftest import lognormal_grid
from rwforecast.density import GridSpec, moments, normalize, quantile
from rwforecast.errors import DataError, DomainError
from rwforecast.sentiment import (
    ProxyHistory,
    ProxyReading,
    SentimentCalibration,
    SentimentState,
    SentimentTracker,
    august_factor,
    delta_iv,
    delta_tv,
    kde_quantile,
    mean_variance_shift,
    real_world_density,
    sentiment_function,
    sentiment_state,
    silverman_bandwidth,
    tail_kernel,
    tail_shift,
    theta1,
    theta2,
    theta3,
)

TAU = 28 / 360
D0 = date(2001, 1, 1)


class TestThetas:
    def test_theta1_dead_zone_and_sign(self):
        assert theta1(0.5, 0.03, TAU, 2.0) == 0.0
        assert theta1(0.05, 0.03, TAU, 2.0) == 0.0
        cap = 2.0 * abs(1 - math.exp(0.03 * TAU))
        assert theta1(0.0, 0.03, TAU, 2.0) == pytest.approx(-cap)
        assert theta1(1.0, 0.03, TAU, 2.0) == pytest.approx(cap)
        assert theta1(0.02, 0.03, TAU, 2.0) == pytest.approx(-cap * 0.6)

    @given(st.floats(0, 1), st.floats(-0.05, 0.1), st.sampled_from([1.0, 2.0]))
    def test_theta1_bounded(self, a, r, k1):
        assert abs(theta1(a, r, TAU, k1)) <= k1 * abs(1 - math.exp(r * TAU)) + 1e-15

    @pytest.mark.parametrize("k2", [1.2, 1.5])
    def test_theta2_range(self, k2):
        assert theta2(0.0, k2) == pytest.approx(1 / k2)
        assert theta2(1.0, k2) == pytest.approx(k2)
        assert theta2(0.5, k2) == 1.0
        a = np.linspace(0, 1, 1001)
        v = np.array([theta2(x, k2) for x in a])
        assert v.min() >= 1 / k2 - 1e-12 and v.max() <= k2 + 1e-12
        assert np.all(np.diff(v) >= 0)

    def test_theta3(self):
        assert theta3(1.5, 2.0) == 0.0 and theta3(-1.5, 2.0) == 0.0
        assert theta3(-2.0, 2.0) == pytest.approx(1.0)
        assert theta3(-2.0, 2.0, "printed") == pytest.approx(-1.0)
        assert theta3(2.5, 1.0) == pytest.approx(-1.0)
        with pytest.raises(DomainError):
            theta3(-2.0, 1.0, "sideways")

    def test_profiles(self):
        low, high = SentimentCalibration.for_profile("low"), SentimentCalibration.for_profile("high")
        assert (low.k1, low.k2, low.k3) == (1.0, 1.2, 1.0)
        assert (high.k1, high.k2, high.k3) == (2.0, 1.5, 2.0)
        with pytest.raises(DomainError):
            SentimentCalibration.for_profile("extreme")

    def test_state_flags(self):
        cal = SentimentCalibration.for_profile("high")
        s = sentiment_state(ProxyReading(0.99, 0.5, -2.0, 0.02, TAU), cal)
        assert s.activated == (True, False, True)
        assert s.theta1 > 0 and s.theta2 == 1.0 and s.theta3 > 0
        quiet = sentiment_state(ProxyReading(0.5, 0.5, float("nan"), 0.02, TAU), cal)
        assert quiet.is_neutral and quiet.activated == (False, False, False)

    def test_state_validation(self):
        with pytest.raises(DomainError):
            SentimentState(theta2=0.0)


class TestProxies:
    def test_delta_iv(self):
        assert delta_iv(0.25, [0.1, 0.2, 0.2, 0.2]) == pytest.approx(0.05)
        assert delta_iv(0.25, [0.2, 0.2]) is None

    def test_delta_tv(self):
        assert delta_tv(150.0, [1.0, 100.0, 100.0, 100.0]) == pytest.approx(1.5)
        assert delta_tv(150.0, [100.0, 100.0]) is None
        assert delta_tv(150.0, [0.0, 100.0, 100.0]) is None
        assert delta_tv(150.0, [100.0] * 3, month=8, seasonal_factor=0.75) == pytest.approx(2.0)
        assert delta_tv(150.0, [100.0] * 3, month=7, seasonal_factor=0.75) == pytest.approx(1.5)

    def test_august_factor(self):
        hist = [(date(2001, m, 1), 100.0) for m in range(5, 8)] + [(date(2001, 8, 1), 60.0)]
        assert august_factor(hist) == pytest.approx(0.6)
        assert august_factor(hist[:3]) is None

    def test_silverman(self):
        x = np.arange(10.0)
        s = np.std(x, ddof=1)
        iqr = np.percentile(x, 75) - np.percentile(x, 25)
        assert silverman_bandwidth(x) == pytest.approx(0.9 * min(s, iqr / 1.34) * 10**-0.2)

    def test_kde_before_burn_in(self):
        assert kde_quantile(np.arange(5.0), 100.0, burn_in=24) == 0.5

    def test_kde_matches_scipy(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(40)
        h = silverman_bandwidth(x)
        ref = gaussian_kde(x, bw_method=h / np.std(x, ddof=1))
        for v in (-2.0, 0.0, 0.7, 2.5):
            assert kde_quantile(x, v) == pytest.approx(ref.integrate_box_1d(-np.inf, v), abs=1e-10)

    def test_kde_monotone_and_symmetric(self):
        x = np.linspace(-1, 1, 30)
        assert kde_quantile(x, 0.0) == pytest.approx(0.5, abs=1e-12)
        v = [kde_quantile(x, t) for t in np.linspace(-1.5, 1.5, 50)]
        assert np.all(np.diff(v) > 0)
        # far outside the history the rank is clipped inside (0, 1)
        assert 0 < kde_quantile(x, -50.0) < 1e-11 and 1 - 1e-11 < kde_quantile(x, 50.0) < 1

    def test_kde_constant_history(self):
        x = np.ones(30)
        assert kde_quantile(x, 2.0) > 0.99 and kde_quantile(x, 0.0) < 0.01
        assert kde_quantile(x, 1.0) == pytest.approx(0.5)


class TestHistory:
    def test_strictly_before(self):
        h = ProxyHistory("iv")
        for i in range(5):
            h.append(D0 + timedelta(i), float(i))
        assert list(h.before(D0 + timedelta(3))) == [0.0, 1.0, 2.0]
        assert len(h.before(D0)) == 0

    def test_dates_increase(self):
        h = ProxyHistory("iv")
        h.append(D0, 1.0)
        with pytest.raises(DataError):
            h.append(D0, 2.0)


def _feed(tracker, n, rng, spike_at=None):
    out = []
    for i in range(n):
        iv = 0.2 + 0.01 * rng.standard_normal()
        vol = 1e5 * math.exp(0.1 * rng.standard_normal())
        if i == spike_at:
            iv, vol = 0.5, 1e6
        out.append(tracker.observe(D0 + timedelta(35 * i), iv, vol, -0.5, 0.02, TAU))
    return out


class TestTracker:
    def test_burn_in_is_silent(self):
        rs = _feed(SentimentTracker(burn_in=24), 27, np.random.default_rng(1))
        # three lags for the first difference plus 24 differences of history
        assert all(r.alpha_iv == 0.5 and r.alpha_tv == 0.5 for r in rs)

    def test_spike_fires(self):
        rs = _feed(SentimentTracker(burn_in=24), 40, np.random.default_rng(1), spike_at=35)
        assert rs[35].alpha_iv > 0.95 and rs[35].alpha_tv > 0.95

    def test_no_look_ahead(self):
        a = _feed(SentimentTracker(), 40, np.random.default_rng(5))
        b = _feed(SentimentTracker(), 60, np.random.default_rng(5))
        assert a == b[:40]

    def test_csv_round_trip(self, tmp_path):
        t = SentimentTracker()
        _feed(t, 10, np.random.default_rng(2))
        t.write_csv(tmp_path / "p.csv")
        back = SentimentTracker.from_csv(tmp_path / "p.csv")
        for k, h in t.histories.items():
            assert back.histories[k].dates == h.dates and back.histories[k].values == h.values

    def test_csv_bad_kind(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("date,kind,value\n2001-01-01,bogus,1\n")
        with pytest.raises(DataError, match="line 2"):
            SentimentTracker.from_csv(p)


class TestTransforms:
    @given(st.floats(-0.02, 0.02), st.floats(0.8, 1.25))
    def test_mean_and_sd(self, t1, t2):
        g = normalize(lognormal_grid(spec=GridSpec(2048, 20.0)))
        m0, v0, _, _ = moments(g)
        out = mean_variance_shift(g, t1, t2)
        m1, v1, _, _ = moments(out)
        assert out.integral() == pytest.approx(1.0, abs=1e-12)
        assert m1 == pytest.approx(m0 + t1, abs=1e-6)
        assert math.sqrt(v1) == pytest.approx(t2 * math.sqrt(v0), rel=1e-5)

    def test_identity(self, ln_grid):
        assert mean_variance_shift(ln_grid, 0.0, 1.0) is ln_grid
        assert tail_shift(ln_grid, 0.0) is ln_grid
        assert real_world_density(ln_grid, SentimentState()) is ln_grid

    def test_bad_multiplier(self, ln_grid):
        with pytest.raises(DomainError):
            mean_variance_shift(ln_grid, 0.0, 0.0)
        with pytest.raises(DomainError):
            tail_shift(ln_grid, 1.0, alpha_tail=0.5)

    def test_tail_kernel_shape(self):
        x = np.array([0.8, 0.9, 1.0, 1.1, 1.2])
        k = tail_kernel(x, 0.9, 1.1, 2.0)
        assert np.allclose(k, [math.exp(0.2), 1.0, 1.0, 1.0, math.exp(-0.2)])

    def test_positive_theta3_moves_mass_right(self):
        g = normalize(lognormal_grid(0.4))
        out = tail_shift(g, 5.0)
        lo, hi = quantile(g, 0.05), quantile(g, 0.95)
        left = lambda d: np.trapezoid(np.where(d.returns < lo, d.pdf, 0), d.returns)  # noqa: E731
        right = lambda d: np.trapezoid(np.where(d.returns > hi, d.pdf, 0), d.returns)  # noqa: E731
        assert left(out) < left(g) and right(out) > right(g)
        assert out.integral() == pytest.approx(1.0, abs=1e-12)

    def test_sentiment_function_ratio(self):
        g = normalize(lognormal_grid())
        rw = real_world_density(g, SentimentState(theta1=0.002, theta2=1.1, theta3=1.0))
        sf = sentiment_function(g, rw)
        ok = sf.defined
        assert np.allclose(sf.psi[ok], g.pdf[ok] / rw.pdf[ok], rtol=1e-14)
        assert np.all(np.isnan(sf.psi[~ok]))
        k = sf.real_world_kernel(0.0, TAU, lambda x: x**-2.0)
        assert np.allclose(k[ok], g.returns[ok] ** -2.0 * sf.psi[ok])

    def test_sentiment_function_grid_mismatch(self):
        a, b = lognormal_grid(), lognormal_grid(0.3)
        with pytest.raises(DomainError):
            sentiment_function(a, b)
