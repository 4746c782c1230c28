"""Synthetic monthly option markets with a known real-world density per date.

Each cycle observes a cross-section 28 days before expiry, prices a strike
ladder with the true model, and draws the settlement from the true
real-world density: the true model's risk-neutral density, tilted by the
true risk preference and distorted by the true sentiment profile, whose
proxies are computed from the generated data exactly as a study would.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .char_models import (
    Bates,
    Heston,
    Lognormal,
    ModelParams,
    VarianceGamma,
    density_from_model,
    log_variance,
    params_from_dict,
    params_to_dict,
    price_european_call,
)
from .config import CRRA_GAMMAS
from .density import GridSpec, bkm_moments, crra_adjust, quantile
from .errors import ConfigError, DomainError, ForecastError
from .market_data import (
    CrossSection,
    OptionQuote,
    atm_implied_vol,
    prepare_section,
    trailing_volume,
    write_option_chain,
    write_series,
    write_settlements,
)
from .sentiment import SentimentCalibration, SentimentState, SentimentTracker, real_world_density, sentiment_state

CYCLE_DAYS = 35
HORIZON_DAYS = 28
HISTORY_DAYS = 70  # daily data generated before the first observation
MIN_PRICE_FRAC = 1e-7  # quotes priced below this fraction of F are not listed


@dataclass(frozen=True)
class SyntheticMarketSpec:
    model: ModelParams = field(default_factory=lambda: Lognormal(0.2))
    n_dates: int = 60
    horizon_days: int = HORIZON_DAYS
    half_spread: float = 0.0
    n_strikes: int = 25
    strike_span_sd: tuple[float, float] = (-4.0, 3.0)
    rate: float = 0.02
    forward: float = 10000.0
    start: date = date(2000, 1, 3)
    risk: str = "RN"
    profile: str = "none"
    alpha_tail: float = 0.05
    burn_in: int = 24
    # log volatility scale follows an AR(1)
    vol_persistence: float = 0.8
    vol_of_vol: float = 0.15
    # monthly volume level: lognormal noise plus occasional up/down bursts
    volume_level: float = 1e5
    volume_noise: float = 0.1
    burst_prob: float = 0.08
    burst_size: float = 0.8
    grid: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self):
        if self.n_dates < 30:
            raise DomainError("a synthetic market needs at least 30 dates")
        if self.horizon_days != HORIZON_DAYS:
            raise DomainError(f"only the {HORIZON_DAYS}-day horizon is supported")
        if self.n_strikes < 2 or not self.strike_span_sd[0] < 0 < self.strike_span_sd[1]:
            raise DomainError("strike ladder must straddle the forward")
        if not 0 <= self.half_spread < 0.5:
            raise DomainError("half-spread must lie in [0, 0.5)")
        if self.risk not in CRRA_GAMMAS:
            raise DomainError(f"synthetic truth risk must be one of {sorted(CRRA_GAMMAS)}")
        if self.profile not in ("none", "low", "high"):
            raise DomainError(f"unknown profile {self.profile!r}")

    @property
    def tau(self) -> float:
        return self.horizon_days / 360.0

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticMarketSpec":
        raw = dict(raw)
        try:
            if "model" in raw:
                raw["model"] = params_from_dict(raw["model"])
            if "start" in raw:
                raw["start"] = date.fromisoformat(raw["start"])
            if "strike_span_sd" in raw:
                raw["strike_span_sd"] = tuple(raw["strike_span_sd"])
            return cls(**raw)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"simulation settings: {exc}") from None


@dataclass(frozen=True, eq=False)
class SyntheticMarket:
    sections: list[CrossSection]
    settlements: dict[date, float]
    volumes: list[tuple[date, float]]
    closes: list[tuple[date, float]]
    truth: list[dict]
    paths: dict[str, Path] = field(default_factory=dict)


def scaled_model(model: ModelParams, scale: float) -> ModelParams:
    """The base model with its volatility level multiplied by ``scale``."""
    if isinstance(model, Lognormal):
        return Lognormal(model.sigma * scale)
    if isinstance(model, (Heston, Bates)):
        return replace(model, v0=model.v0 * scale**2, vbar=model.vbar * scale**2)
    if isinstance(model, VarianceGamma):
        return replace(model, sigma=model.sigma * scale)
    raise DomainError(f"cannot scale {type(model).__name__}")


def _business_days(lo: date, hi: date) -> list[date]:
    n = (hi - lo).days
    return [lo + timedelta(d) for d in range(n + 1) if (lo + timedelta(d)).weekday() < 5]


def strike_ladder(spec: SyntheticMarketSpec, forward: float, sd: float) -> np.ndarray:
    lo, hi = spec.strike_span_sd
    K = np.round(forward * np.exp(np.linspace(lo * sd, hi * sd, spec.n_strikes)))
    return np.unique(K)


def quote_section(spec: SyntheticMarketSpec, model: ModelParams, obs: date, forward: float,
                  rng: np.random.Generator) -> CrossSection:
    """Out-of-the-money quotes (puts below the forward) around true model prices."""
    tau = spec.tau
    sd = math.sqrt(max(log_variance(model, tau), 1e-12))
    K = strike_ladder(spec, forward, sd)
    calls = price_european_call(model, K, tau, forward, spec.rate)
    disc = math.exp(-spec.rate * tau)
    quotes = []
    for k, c in zip(K, calls):
        side, true = ("C", c) if k >= forward else ("P", c - disc * (forward - k))
        if not true > MIN_PRICE_FRAC * forward:
            continue
        h = spec.half_spread
        mid = true * (1.0 + 0.5 * h * rng.uniform(-1.0, 1.0)) if h > 0 else true
        quotes.append(OptionQuote(float(k), float(mid - h * true), float(mid + h * true), side))
    return CrossSection(obs, obs + timedelta(spec.horizon_days), forward, spec.rate, tuple(quotes))


def simulate_market(spec: SyntheticMarketSpec, seed: int, out_dir=None) -> SyntheticMarket:
    """Generate option chains, settlements, daily volumes and closes; optionally write them as CSVs."""
    rng = np.random.default_rng(seed)
    tau = spec.tau
    obs_dates = [spec.start + timedelta(CYCLE_DAYS * i) for i in range(spec.n_dates)]
    gamma = CRRA_GAMMAS[spec.risk]
    cal = None if spec.profile == "none" else SentimentCalibration.for_profile(spec.profile)
    tracker = SentimentTracker(burn_in=spec.burn_in)

    # daily volumes: one level per cycle, applied to the business days ending at each observation
    volumes: list[tuple[date, float]] = []
    first = spec.start - timedelta(HISTORY_DAYS)
    level = math.log(spec.volume_level)
    prev = first - timedelta(1)
    for obs in obs_dates:
        burst = spec.burst_size * rng.choice([-1.0, 1.0]) if rng.uniform() < spec.burst_prob else 0.0
        lvl = level + spec.volume_noise * rng.standard_normal() + burst
        for d in _business_days(prev + timedelta(1), obs):
            volumes.append((d, float(math.exp(lvl + 0.1 * rng.standard_normal()))))
        prev = obs

    closes: list[tuple[date, float]] = []
    forward = spec.forward
    x = 0.0
    sections, settlements, truth = [], {}, []
    base_sd = math.sqrt(log_variance(spec.model, tau) / tau)
    # pre-sample history of daily closes ending at the first forward
    pre = _business_days(first, obs_dates[0])
    steps = base_sd / math.sqrt(252.0) * rng.standard_normal(len(pre) - 1)
    path = forward * np.exp(np.concatenate([[0.0], np.cumsum(steps)]) - np.sum(steps))
    closes += [(d, float(p)) for d, p in zip(pre, path)]

    for i, obs in enumerate(obs_dates):
        if i:
            x = spec.vol_persistence * x + spec.vol_of_vol * rng.standard_normal()
        model = scaled_model(spec.model, math.exp(x))
        raw = quote_section(spec, model, obs, forward, rng)
        sections.append(raw)
        expiry = raw.expiry_date
        section = prepare_section(raw)
        atm_iv = atm_implied_vol(section)
        returns = spec.grid.returns(atm_iv * math.sqrt(tau))
        try:
            skew = bkm_moments(section).skew
        except ForecastError:
            skew = None
        vol = trailing_volume(volumes, obs)
        reading = tracker.observe(obs, atm_iv, vol, skew, spec.rate, tau)
        state = SentimentState() if cal is None else sentiment_state(reading, cal)
        f_q = density_from_model(model, tau, forward, returns)
        f_rw = real_world_density(crra_adjust(f_q, gamma), state, spec.alpha_tail)
        u = float(rng.uniform())
        gross = quantile(f_rw, u)
        settle = forward * gross
        settlements[expiry] = settle
        truth.append({
            "obs_date": obs.isoformat(), "expiry_date": expiry.isoformat(), "forward": forward,
            "settlement": settle, "u": u, "params": params_to_dict(model),
            "theta1": state.theta1, "theta2": state.theta2, "theta3": state.theta3,
        })
        # daily closes: bridge to the settlement, then a free walk to the next observation
        daily = math.sqrt(log_variance(model, tau) / tau / 252.0)
        span = _business_days(obs + timedelta(1), expiry)
        if span:
            n = len(span)
            w = np.cumsum(daily * rng.standard_normal(n))
            t = np.arange(1, n + 1) / n
            logp = math.log(forward) + w - t * w[-1] + t * math.log(settle / forward)
            closes += [(d, float(math.exp(v))) for d, v in zip(span, logp)]
        nxt = obs + timedelta(CYCLE_DAYS)
        tail = _business_days(expiry + timedelta(1), nxt)
        if not span or span[-1] != expiry:
            closes.append((expiry, settle))
        walk = settle * np.exp(np.cumsum(daily * rng.standard_normal(len(tail))))
        closes += [(d, float(p)) for d, p in zip(tail, walk)]
        forward = float(walk[-1]) if len(tail) else settle
        if tail and tail[-1] != nxt:
            closes.append((nxt, forward))
    closes = sorted(dict(closes).items())
    market = SyntheticMarket(sections, settlements, volumes, closes, truth)
    if out_dir is not None:
        market = replace(market, paths=write_market(market, out_dir))
    return market


def write_market(market: SyntheticMarket, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.csv" for k in ("options", "settlements", "volumes", "prices", "truth")}
    write_option_chain(paths["options"], market.sections)
    write_settlements(paths["settlements"], market.settlements)
    write_series(paths["volumes"], "volume", market.volumes)
    write_series(paths["prices"], "close", market.closes)
    with paths["truth"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("obs_date", "expiry_date", "forward", "settlement", "u", "params", "theta1", "theta2", "theta3"))
        for t in market.truth:
            w.writerow([t["obs_date"], t["expiry_date"], repr(t["forward"]), repr(t["settlement"]), repr(t["u"]),
                        json.dumps(t["params"], sort_keys=True), repr(t["theta1"]), repr(t["theta2"]),
                        repr(t["theta3"])])
    return paths
