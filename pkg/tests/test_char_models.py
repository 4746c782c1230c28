from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import norm

import rwforecast.char_models as cm
from rwforecast.char_models import (
    Bates,
    Heston,
    Lognormal,
    StrikePricer,
    VarianceGamma,
    black76_call,
    cdf_from_cf,
    characteristic_function,
    density_from_model,
    exercise_probabilities,
    implied_vol,
    params_from_dict,
    params_to_dict,
    price_european_call,
)
from rwforecast.density import moments
from rwforecast.errors import DomainError, NumericalError

TAU = 28 / 360
MODELS = [
    Lognormal(0.2),
    Heston(0.04, 0.05, 1.5, 0.5, -0.6),
    Bates(0.04, 0.05, 1.5, 0.5, -0.6, 0.5, -0.1, 0.15),
    VarianceGamma(0.12, 0.2, -0.14),
]


@pytest.mark.parametrize("model", MODELS, ids=lambda m: m.kind)
class TestCharacteristicFunction:
    def test_unit_at_zero(self, model):
        v = characteristic_function(model, 0.0, TAU, 100.0)
        assert abs(v - 1.0) < 1e-14

    def test_martingale(self, model):
        v = characteristic_function(model, -1j, TAU, 100.0)
        assert abs(v - 100.0) < 1e-10 * 100

    def test_cdf_limits_and_monotone(self, model):
        K = 100.0 * np.exp(np.linspace(-1.5, 1.5, 301))
        c = cdf_from_cf(model, K, TAU, 100.0)
        assert c[0] < 1e-6 and c[-1] > 1 - 1e-6
        assert np.all(np.diff(c) >= -1e-8)

    def test_price_shape(self, model):
        K = 100.0 * np.exp(np.linspace(-0.4, 0.3, 60))
        C = price_european_call(model, K, TAU, 100.0, 0.02)
        assert np.all(np.diff(C) < 0)
        slopes = np.diff(C) / np.diff(K)
        assert np.all(np.diff(slopes) >= -1e-9)

    def test_deep_itm_limit(self, model):
        c = price_european_call(model, 1e-6, TAU, 100.0, 0.03)
        assert c == pytest.approx(math.exp(-0.03 * TAU) * 100.0, abs=1e-5)

    def test_density_normalized(self, model):
        g = density_from_model(model, TAU, 100.0)
        assert abs(g.integral() - 1.0) < 1e-8
        assert np.all(g.pdf >= 0)
        # forward measure: mean gross return 1, up to tail mass beyond the grid
        assert abs(moments(g)[0] - 1.0) < 1e-4

    def test_strike_pricer_agrees(self, model):
        K = 100.0 * np.exp(np.linspace(-0.25, 0.18, 25))
        fast = StrikePricer(K, TAU, 100.0, 0.01, 0.2 * math.sqrt(TAU))(model)
        ref = price_european_call(model, K, TAU, 100.0, 0.01)
        assert np.allclose(fast, ref, rtol=1e-5, atol=1e-9)

    def test_params_dict_round_trip(self, model):
        assert params_from_dict(params_to_dict(model)) == model


def test_lognormal_cf_closed_form():
    v = characteristic_function(Lognormal(0.2), 1.0, 1.0, 100.0)
    expected = np.exp(1j * (math.log(100) - 0.02) - 0.02)
    assert abs(v - expected) < 1e-14


def test_lognormal_cdf_at_forward():
    s = 0.2 * math.sqrt(TAU)
    c = cdf_from_cf(Lognormal(0.2), [100.0], TAU, 100.0)[0]
    assert c == pytest.approx(norm.cdf(s / 2), abs=1e-10)
    assert round(c, 5) == 0.51112


def test_lognormal_cdf_closed_form():
    s = 0.2 * math.sqrt(TAU)
    K = 100.0 * np.exp(np.linspace(-8 * s, 8 * s, 400))
    got = cdf_from_cf(Lognormal(0.2), K, TAU, 100.0)
    exact = norm.cdf((np.log(K / 100.0) + 0.5 * s * s) / s)
    assert np.max(np.abs(got - exact)) < 1e-9


def test_lognormal_density_closed_form():
    s = 0.2 * math.sqrt(TAU)
    g = density_from_model(Lognormal(0.2), TAU, 100.0)
    x = g.returns
    exact = norm.pdf((np.log(x) + 0.5 * s * s) / s) / (x * s)
    assert np.max(np.abs(g.pdf - exact)) < 1e-6


def test_black76_atm_value():
    c = price_european_call(Lognormal(0.2), 100.0, TAU, 100.0, 0.0)
    assert c == pytest.approx(black76_call(100.0, 100.0, TAU, 0.0, 0.2), abs=1e-10)
    assert round(c, 4) == 2.2249


def test_put_from_probabilities_matches_black76():
    m, F, r = Lognormal(0.25), 100.0, 0.03
    K = np.array([80.0, 95.0, 100.0, 110.0])
    p1, p2 = exercise_probabilities(m, K, TAU, F)
    disc = math.exp(-r * TAU)
    put = disc * (K * (1 - p2) - F * (1 - p1))
    bput = black76_call(F, K, TAU, r, 0.25) - disc * (F - K)
    assert np.max(np.abs(put - bput)) < 1e-9
    call = price_european_call(m, K, TAU, F, r)
    assert np.max(np.abs(call - (put + disc * (F - K)))) < 1e-9


def test_bates_without_jumps_is_heston():
    h = Heston(0.03, 0.06, 2.0, 0.7, -0.5)
    b = Bates(0.03, 0.06, 2.0, 0.7, -0.5, 0.0, -0.2, 0.2)
    w = np.linspace(-50, 50, 1001)
    assert np.max(np.abs(characteristic_function(b, w, TAU, 100) - characteristic_function(h, w, TAU, 100))) < 1e-12
    K = np.linspace(70, 130, 200)
    assert np.max(np.abs(cdf_from_cf(b, K, TAU, 100) - cdf_from_cf(h, K, TAU, 100))) < 1e-10


def test_degenerate_heston_is_lognormal():
    h = Heston(0.04, 0.04, 1.5, 1e-8, -0.5)
    K = 100.0 * np.exp(np.linspace(-0.3, 0.3, 101))
    assert np.max(np.abs(cdf_from_cf(h, K, TAU, 100) - cdf_from_cf(Lognormal(0.2), K, TAU, 100))) < 1e-4


def test_heston_long_horizon_stable():
    # parameters with many branch-cut crossings in the naive formula
    h = Heston(0.09, 0.09, 0.3, 1.5, -0.9)
    w = np.linspace(0.01, 60, 4000)
    phi = characteristic_function(h, w, 10.0, 1.0)
    assert np.all(np.isfinite(phi)) and np.all(np.abs(phi) <= 1 + 1e-12)
    # continuity: no jumps between neighbouring frequencies
    assert np.max(np.abs(np.diff(phi))) < 0.05
    c = price_european_call(h, np.array([0.5, 1.0, 2.0]), 10.0, 1.0, 0.0)
    assert np.all(c > 0) and np.all(np.diff(c) < 0)


def test_vg_negative_theta_left_skew_matches_simulation():
    m = VarianceGamma(0.12, 0.2, -0.14)
    tau = 0.25
    g = density_from_model(m, tau, 1.0)
    skew = moments(g)[2]
    assert skew < 0
    rng = np.random.default_rng(7)
    n = 1_000_000
    G = rng.gamma(tau / m.nu, m.nu, n)
    X = m.theta * G + m.sigma * np.sqrt(G) * rng.standard_normal(n) + m.omega * tau
    R = np.exp(X)
    mc = ((R - R.mean()) ** 3).mean() / R.std() ** 3
    assert abs(skew - mc) < 0.05


def test_vg_restriction():
    with pytest.raises(DomainError):
        VarianceGamma(0.2, 2.0, 0.5)


def test_domain_errors():
    with pytest.raises(DomainError):
        characteristic_function(Lognormal(0.2), 1.0, 0.0, 100)
    with pytest.raises(DomainError):
        cdf_from_cf(Lognormal(0.2), [-1.0], TAU, 100)
    with pytest.raises(DomainError):
        Heston(0.04, 0.04, 1.0, 0.5, 1.5)


def test_quadrature_failure_carries_location(monkeypatch):
    monkeypatch.setattr(cm, "QUAD_TOL", -1.0)
    with pytest.raises(NumericalError) as info:
        cdf_from_cf(Heston(0.04, 0.05, 1.5, 0.5, -0.6), [90.0, 100.0], TAU, 100.0)
    assert info.value.where is not None


@given(st.floats(0.05, 1.5), st.floats(0.6, 1.6), st.integers(5, 720), st.floats(-0.02, 0.1))
def test_implied_vol_round_trip(sigma, m, days, r):
    tau = days / 360
    c = black76_call(100.0, 100.0 * m, tau, r, sigma)
    if c < 1e-10:
        return
    iv = implied_vol(c, 100.0, 100.0 * m, tau, r)
    assert abs(black76_call(100.0, 100.0 * m, tau, r, iv) - c) < 1e-10 * max(1.0, c)
    d1 = (math.log(1 / m) + 0.5 * sigma**2 * tau) / (sigma * math.sqrt(tau))
    vega = 100.0 * math.exp(-r * tau) * norm.pdf(d1) * math.sqrt(tau)
    if vega > 1e-3:
        # vol is identified only where the price is sensitive to it
        assert abs(iv - sigma) < 1e-6


def test_implied_vol_unbracketed():
    with pytest.raises(NumericalError):
        implied_vol(150.0, 100.0, 100.0, TAU, 0.0)
