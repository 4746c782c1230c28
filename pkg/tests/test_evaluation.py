from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.optimize import minimize
from scipy.stats import chi2, norm

from conftest import OBS, lognormal_grid
from rwforecast.density import GridSpec, moments, normalize
from rwforecast.errors import DomainError, InsufficientDataError
from rwforecast.evaluation import (
    LOG_FLOOR,
    ForecastRecord,
    ScoreSummary,
    berkowitz_lr3,
    calibration_function,
    crps_aggregate,
    crps_single,
    ifs,
    jarque_bera,
    ks_normal,
    log_density,
    log_score,
    pit_series,
    recalibrate,
    stat_scores,
    summarize,
)

TAU = 28 / 360


def crps_lognormal(mu: float, s: float, y: float) -> float:
    """Closed-form CRPS of a lognormal law with log-mean mu and log-sd s."""
    w = (math.log(y) - mu) / s
    return y * (2 * norm.cdf(w) - 1) - 2 * math.exp(mu + s * s / 2) * (norm.cdf(w - s) + norm.cdf(s / math.sqrt(2)) - 1)


def _grid(sigma=0.2, forward=100.0):
    return normalize(lognormal_grid(sigma, forward=forward, spec=GridSpec(4096, 12.0)))


class TestCrps:
    @pytest.mark.parametrize("y", [0.9, 0.97, 1.0, 1.02, 1.1])
    def test_closed_form(self, y):
        s = 0.2 * math.sqrt(TAU)
        # the grid CDF is a trapezoid running sum, so agreement is to discretization error
        assert crps_single(_grid(), y) == pytest.approx(crps_lognormal(-s * s / 2, s, y), abs=1e-6)

    def test_quadrature_oracle(self):
        g = _grid()
        s = 0.2 * math.sqrt(TAU)
        cdf = lambda x: norm.cdf((math.log(x) + s * s / 2) / s)  # noqa: E731
        y = 1.03
        ref = quad(lambda x: cdf(x) ** 2, 0, y, limit=200)[0] + quad(lambda x: (1 - cdf(x)) ** 2, y, 3, limit=200)[0]
        assert crps_single(g, y) == pytest.approx(ref, abs=1e-6)

    def test_outside_grid(self):
        g = _grid()
        lo, hi = g.returns[0], g.returns[-1]
        assert crps_single(g, lo / 2) == pytest.approx(lo / 2 + crps_single(g, lo), abs=1e-12)
        assert crps_single(g, 2 * hi) == pytest.approx(hi + crps_single(g, hi), abs=1e-12)

    def test_root_form_aggregate(self):
        g = _grid()
        recs = [ForecastRecord(OBS, "m", g, 0.95), ForecastRecord(OBS, "m", g, 1.08)]
        a, b = crps_single(g, 0.95), crps_single(g, 1.08)
        assert crps_aggregate(recs) == pytest.approx((math.sqrt(a) + math.sqrt(b)) / 2, rel=1e-14)
        with pytest.raises(InsufficientDataError):
            crps_aggregate([])

    def test_truth_beats_wider_forecast_on_average(self):
        s = 0.2 * math.sqrt(TAU)
        ys = np.exp(-s * s / 2 + s * np.random.default_rng(2).standard_normal(400))
        true, wide = _grid(0.2), _grid(0.4)
        assert np.mean([crps_single(true, y) for y in ys]) < np.mean([crps_single(wide, y) for y in ys])


class TestLogScore:
    def test_price_space(self):
        g = _grid(forward=100.0)
        rec = ForecastRecord(OBS, "m", g, 1.0)
        v, hit = log_density(rec)
        assert not hit
        assert v == pytest.approx(math.log(float(g.pdf_at(1.0)) / 100.0), rel=1e-14)

    def test_floor(self):
        g = _grid()
        rec = ForecastRecord(OBS, "m", g, 50.0)
        assert log_density(rec) == (math.log(LOG_FLOOR), True)
        assert log_score([rec, rec]) == pytest.approx(2 * math.log(LOG_FLOOR))

    def test_realization_positive(self):
        with pytest.raises(DomainError):
            ForecastRecord(OBS, "m", _grid(), 0.0)


def test_pit_at_median():
    g = _grid()
    s = 0.2 * math.sqrt(TAU)
    pits, t = pit_series([ForecastRecord(OBS, "m", g, math.exp(-s * s / 2))])
    assert pits[0] == pytest.approx(0.5, abs=1e-6) and abs(t[0]) < 1e-5


def _lr3_oracle(z):
    """LR statistic by direct maximization of the conditional Gaussian AR(1) likelihood."""
    y, x = z[1:], z[:-1]

    def nll(p):
        c, a, ls = p
        s2 = math.exp(2 * ls)
        e = y - c - a * x
        return 0.5 * y.size * math.log(2 * math.pi * s2) + 0.5 * float(e @ e) / s2

    free = minimize(nll, [0.0, 0.0, 0.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    lr = 2 * (nll([0.0, 0.0, 0.0]) - free.fun)
    return chi2.sf(lr, 3)


class TestTests:
    def test_lr3_matches_direct_maximization(self):
        z = np.random.default_rng(3).standard_normal(120) * 1.1 + 0.1
        assert berkowitz_lr3(z) == pytest.approx(_lr3_oracle(z), abs=1e-6)

    def test_lr3_detects_bias(self):
        rng = np.random.default_rng(4)
        assert berkowitz_lr3(rng.standard_normal(254)) > 0.01
        assert berkowitz_lr3(rng.standard_normal(254) + 0.5) < 1e-4

    def test_jb_ks(self):
        rng = np.random.default_rng(5)
        assert jarque_bera(rng.standard_t(3, 500)) < 1e-3
        assert ks_normal(rng.standard_normal(500) + 0.5) < 1e-3
        assert ks_normal(rng.standard_normal(500)) > 0.01

    def test_min_size(self):
        for f in (berkowitz_lr3, jarque_bera, ks_normal):
            with pytest.raises(InsufficientDataError):
                f(np.zeros(19))


def _summary(name, L, C, p=(0.5, 0.5, 0.5), n=30, seed=0):
    rng = np.random.default_rng(seed)
    ls = rng.standard_normal(n)
    ls = ls - ls.mean() + L / n
    cr = np.abs(rng.standard_normal(n)) * 0.01
    cr = cr - cr.mean() + C
    return ScoreSummary(name, L, C, np.full(n, 0.5), np.zeros(n), *p, ls, cr)


class TestIfs:
    def test_two_model_example(self):
        out = ifs([_summary("a", 10.0, 0.02), _summary("b", 12.0, 0.02)])
        assert out[0].l_bar == pytest.approx(norm.cdf(-1 / math.sqrt(2)))
        assert out[1].l_bar == pytest.approx(norm.cdf(1 / math.sqrt(2)))
        assert out[0].crps_bar == out[1].crps_bar == 0.5
        # all tests pass for both; equal p-values share the middle rank
        assert out[0].stat_bar == pytest.approx(0.75 + 0.25 * 0.5)

    def test_stat_scores(self):
        s = [_summary("a", 0, 0.02, (0.5, 0.5, 0.5)), _summary("b", 0, 0.02, (0.01, 0.01, 0.01)),
             _summary("c", 0, 0.02, (0.255, 0.01, 0.5))]
        v = stat_scores(s)
        assert v[0] == pytest.approx(1.0) and v[1] == pytest.approx(0.0)
        assert v[2] == pytest.approx(0.25 * 2 + 0.25 * (0.5 + 0 + 1) / 3)

    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=8), st.sampled_from(["cross_model", "within_model"]))
    def test_bounded_and_symmetric(self, Ls, norm_kind):
        s = [_summary(f"m{i}", L, 0.02 + 0.001 * i, seed=i) for i, L in enumerate(Ls)]
        out = ifs(s, norm_kind)
        assert all(0 <= o.ifs <= 1 for o in out)
        rev = ifs(s[::-1], norm_kind)[::-1]
        assert all(a.ifs == pytest.approx(b.ifs, abs=1e-12) for a, b in zip(out, rev))

    def test_monotone_in_log_score(self):
        s = [_summary(f"m{i}", L, 0.02) for i, L in enumerate([5.0, 7.0, 9.0, 30.0])]
        for kind in ("cross_model", "within_model"):
            v = [o.ifs for o in ifs(s, kind)]
            assert np.all(np.diff(v) > 0)

    def test_errors(self):
        with pytest.raises(InsufficientDataError):
            ifs([_summary("a", 1.0, 0.02)])
        with pytest.raises(DomainError):
            ifs([_summary("a", 1.0, 0.02), _summary("b", 1.0, 0.02)], "global")


def test_summarize_end_to_end():
    g = _grid()
    rng = np.random.default_rng(9)
    s = 0.2 * math.sqrt(TAU)
    ys = np.exp(-s * s / 2 + s * rng.standard_normal(60))
    recs = [ForecastRecord(OBS, "LN", g, float(y)) for y in ys]
    out = summarize("LN", recs)
    assert out.n == 60
    assert out.total_log_score == pytest.approx(log_score(recs))
    assert out.crps_mean == pytest.approx(crps_aggregate(recs))
    assert out.p_ks > 0.01


class TestRecalibration:
    def test_calibrated_history_is_nearly_identity(self):
        z = norm.ppf((np.arange(200) + 0.5) / 200)
        c = calibration_function(z, np.linspace(-1.5, 1.5, 7))
        assert np.allclose(c, 1.0, atol=0.08)

    def test_shifts_towards_past_mistakes(self):
        g = _grid()
        past = np.random.default_rng(1).standard_normal(120) + 0.6
        out = recalibrate(g, past)
        assert out.integral() == pytest.approx(1.0, abs=1e-12)
        assert moments(out)[0] > moments(g)[0]

    def test_short_history_skipped(self):
        g = _grid()
        assert recalibrate(g, np.zeros(10)) is g
