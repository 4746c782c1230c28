"""Sentiment proxies, activation thresholds and the behavioral density transform.

Three proxies drive three corrections: changes in ATM implied volatility
set a mean shift (theta1), changes in traded volume a volatility multiplier
(theta2) and model-free risk-neutral skewness a tail shift (theta3). Each
proxy is ranked against its own past through a Gaussian-kernel CDF, and a
correction fires only outside the central 90% of that history.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr

from .density import DensityGrid, normalize, quantile
from .errors import DataError, DomainError

log = logging.getLogger(__name__)

DEAD_ZONE = (0.05, 0.95)
SKEW_THRESHOLD = 1.5
OFF_GRID_WARN = 1e-4
PROFILES = {"low": (1.0, 1.2, 1.0), "high": (2.0, 1.5, 2.0)}
PROXY_KINDS = ("iv", "tv", "delta_iv", "delta_tv", "skew")


@dataclass(frozen=True)
class SentimentCalibration:
    k1: float
    k2: float
    k3: float
    profile: str

    @classmethod
    def for_profile(cls, profile: str) -> "SentimentCalibration":
        if profile not in PROFILES:
            raise DomainError(f"unknown sentiment profile {profile!r}")
        return cls(*PROFILES[profile], profile)


@dataclass(frozen=True)
class SentimentState:
    theta1: float = 0.0
    theta2: float = 1.0
    theta3: float = 0.0
    alpha_iv: float = 0.5
    alpha_tv: float = 0.5
    skew: float = 0.0
    activated: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        if not self.theta2 > 0:
            raise DomainError("theta2 must be positive")
        if not (math.isfinite(self.theta1) and math.isfinite(self.theta3)):
            raise DomainError("theta1 and theta3 must be finite")

    @property
    def is_neutral(self) -> bool:
        return self.theta1 == 0.0 and self.theta2 == 1.0 and self.theta3 == 0.0


class ProxyHistory:
    """Append-only dated series; queries only see observations strictly before the query date."""

    def __init__(self, kind: str, guard=None):
        self.kind = kind
        self.dates: list[date] = []
        self.values: list[float] = []
        self.guard = guard

    def __len__(self):
        return len(self.values)

    def append(self, when: date, value: float) -> None:
        if self.dates and when <= self.dates[-1]:
            raise DataError(f"{self.kind} history dates must increase ({when} after {self.dates[-1]})")
        self.dates.append(when)
        self.values.append(float(value))

    def before(self, when: date) -> np.ndarray:
        j = int(np.searchsorted(np.array(self.dates, dtype="datetime64[D]"), np.datetime64(when), side="left"))
        if self.guard is not None and j:
            self.guard.check(when, self.dates[j - 1], f"{self.kind} history")
        return np.asarray(self.values[:j], dtype=float)


# ---------------------------------------------------------------------------
# proxies and the kernel-smoothed rank


def delta_iv(current: float, priors: Sequence[float]) -> float | None:
    """Current ATM vol minus the mean of the three previous monthly values."""
    if len(priors) < 3:
        return None
    return float(current - np.mean(priors[-3:]))


def august_factor(tv_history: Sequence[tuple[date, float]]) -> float | None:
    """Mean ratio of past August volumes to the average of their three preceding months."""
    ratios = []
    for i, (d, v) in enumerate(tv_history):
        if d.month == 8 and i >= 3:
            prev = [x for _, x in tv_history[i - 3:i]]
            if min(prev) > 0:
                ratios.append(v / np.mean(prev))
    return float(np.mean(ratios)) if ratios else None


def delta_tv(current: float, priors: Sequence[float], month: int | None = None,
             seasonal_factor: float | None = None) -> float | None:
    """Volume over the average of the previous three months, optionally deseasonalized in August."""
    if len(priors) < 3:
        return None
    prev = np.asarray(priors[-3:], dtype=float)
    if np.any(prev <= 0):
        return None
    out = float(current / prev.mean())
    if month == 8 and seasonal_factor:
        out /= seasonal_factor
    return out


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    s = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(s, (q75 - q25) / 1.34) if q75 > q25 else s
    return 0.9 * spread * x.size ** (-0.2)


def kde_quantile(history, new_obs: float, burn_in: int = 24) -> float:
    """Position of ``new_obs`` in the Gaussian-kernel CDF of ``history``; 0.5 before burn-in."""
    x = np.asarray(history, dtype=float)
    if x.size < burn_in or x.size == 0:
        return 0.5
    h = silverman_bandwidth(x)
    if h > 0:
        alpha = float(np.mean(ndtr((new_obs - x) / h)))
    else:
        alpha = float(np.mean((x < new_obs) + 0.5 * (x == new_obs)))
    return min(max(alpha, 1e-12), 1.0 - 1e-12)


# ---------------------------------------------------------------------------
# activation rules


def theta1(alpha_iv: float, rate: float, tau: float, k1: float) -> float:
    """Mean shift in gross-return units; negative below the 5% rank, positive above 95%."""
    lo, hi = DEAD_ZONE
    excess = 1.0 - math.exp(rate * tau)
    if alpha_iv < lo:
        return excess * k1 * (lo - alpha_iv) / lo
    if alpha_iv > hi:
        return -excess * k1 * (alpha_iv - hi) / (1.0 - hi)
    return 0.0


def theta2(alpha_tv: float, k2: float) -> float:
    """Volatility multiplier: 1 in the dead zone, down to 1/k2 at rank 0 and up to k2 at rank 1."""
    lo, hi = DEAD_ZONE
    if alpha_tv < lo:
        return 1.0 + (1.0 / k2 - 1.0) * (lo - alpha_tv) / lo
    if alpha_tv > hi:
        return 1.0 + (k2 - 1.0) * (alpha_tv - hi) / (1.0 - hi)
    return 1.0


def theta3(skew: float, k3: float, sign: str = "flipped") -> float:
    """Tail-shift intensity from risk-neutral skewness beyond +/-1.5.

    ``flipped`` (default) makes strong negative skew (left-tail fear) give a
    positive theta3, which moves mass from the left to the right tail.
    ``printed`` keeps the opposite orientation for sensitivity runs.
    """
    if abs(skew) <= SKEW_THRESHOLD:
        return 0.0
    raw = k3 * (skew + SKEW_THRESHOLD) if skew < 0 else k3 * (skew - SKEW_THRESHOLD)
    if sign == "flipped":
        return -raw
    if sign == "printed":
        return raw
    raise DomainError(f"theta3 sign convention must be 'flipped' or 'printed', got {sign!r}")


@dataclass(frozen=True)
class ProxyReading:
    """Profile-independent inputs of one date's sentiment state."""

    alpha_iv: float = 0.5
    alpha_tv: float = 0.5
    skew: float = 0.0
    rate: float = 0.0
    tau: float = 0.0


def sentiment_state(reading: ProxyReading, cal: SentimentCalibration, theta3_sign: str = "flipped") -> SentimentState:
    t1 = theta1(reading.alpha_iv, reading.rate, reading.tau, cal.k1)
    t2 = theta2(reading.alpha_tv, cal.k2)
    t3 = theta3(reading.skew, cal.k3, theta3_sign) if math.isfinite(reading.skew) else 0.0
    lo, hi = DEAD_ZONE
    flags = (
        not lo <= reading.alpha_iv <= hi,
        not lo <= reading.alpha_tv <= hi,
        math.isfinite(reading.skew) and abs(reading.skew) > SKEW_THRESHOLD,
    )
    return SentimentState(t1, t2, t3, reading.alpha_iv, reading.alpha_tv, reading.skew, flags)


@dataclass
class SentimentTracker:
    """Sequential proxy bookkeeping in date order.

    ``observe`` must be called once per observation date in increasing
    order; the reading for date t ranks the new proxies only against
    values recorded for earlier dates.
    """

    burn_in: int = 24
    august_adjust: bool = False
    guard: object = None
    histories: dict[str, ProxyHistory] = field(default_factory=dict)

    def __post_init__(self):
        for kind in PROXY_KINDS:
            self.histories.setdefault(kind, ProxyHistory(kind, self.guard))

    def observe(self, when: date, atm_iv: float | None, volume: float | None, skew: float | None,
                rate: float, tau: float) -> ProxyReading:
        h = self.histories
        alpha_iv = alpha_tv = 0.5
        if atm_iv is not None and math.isfinite(atm_iv):
            d = delta_iv(atm_iv, h["iv"].before(when))
            if d is not None:
                alpha_iv = kde_quantile(h["delta_iv"].before(when), d, self.burn_in)
                h["delta_iv"].append(when, d)
            h["iv"].append(when, atm_iv)
        if volume is not None and math.isfinite(volume):
            prior = h["tv"].before(when)
            factor = None
            if self.august_adjust and when.month == 8:
                factor = august_factor(list(zip(h["tv"].dates[: len(prior)], prior)))
            d = delta_tv(volume, prior, when.month, factor)
            if d is not None:
                alpha_tv = kde_quantile(h["delta_tv"].before(when), d, self.burn_in)
                h["delta_tv"].append(when, d)
            h["tv"].append(when, volume)
        sk = float("nan")
        if skew is not None and math.isfinite(skew):
            sk = float(skew)
            h["skew"].append(when, sk)
        return ProxyReading(alpha_iv, alpha_tv, sk, rate, tau)

    def write_csv(self, path) -> None:
        rows = sorted((d, kind, v) for kind, hist in self.histories.items() for d, v in zip(hist.dates, hist.values))
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("date", "kind", "value"))
            for d, kind, v in rows:
                w.writerow([d.isoformat(), kind, repr(v)])

    @classmethod
    def from_csv(cls, path, **kwargs) -> "SentimentTracker":
        tracker = cls(**kwargs)
        with Path(path).open(newline="") as fh:
            for i, row in enumerate(csv.DictReader(fh), start=2):
                kind = row.get("kind", "")
                if kind not in tracker.histories:
                    raise DataError(f"line {i}: unknown proxy kind {kind!r}")
                tracker.histories[kind].append(date.fromisoformat(row["date"]), float(row["value"]))
        return tracker


# ---------------------------------------------------------------------------
# density transforms


def mean_variance_shift(grid: DensityGrid, t1: float, t2: float) -> DensityGrid:
    """Affine change of variable ``y = t1 + t2 x + (1 - t2) mu`` resampled onto the input grid.

    The result has mean ``mu + t1`` and standard deviation ``t2 * sd``.
    """
    if not t2 > 0:
        raise DomainError("volatility multiplier must be positive")
    if t1 == 0.0 and t2 == 1.0:
        return grid
    x = grid.returns
    mu = float(np.trapezoid(x * grid.pdf, x))
    src = (x - t1 - (1.0 - t2) * mu) / t2
    inside = (src >= x[0]) & (src <= x[-1])
    pdf = np.zeros_like(x)
    pdf[inside] = np.maximum(CubicSpline(x, grid.pdf)(src[inside]), 0.0) / t2
    # mass the map sends beyond the grid (below it: towards non-positive prices) is dropped
    out = grid.with_pdf(pdf)
    total = out.integral()
    lost = 1.0 - total
    if lost > OFF_GRID_WARN:
        log.warning("mean-variance shift pushed %.3g of mass off the return grid; renormalizing", lost)
    elif lost > 1e-8:
        log.debug("mean-variance shift dropped %.3g of mass at the grid edges", lost)
    return normalize(out)


def tail_kernel(returns, q_lo: float, q_hi: float, t3: float) -> np.ndarray:
    x = np.asarray(returns, dtype=float)
    out = np.ones_like(x)
    left, right = x < q_lo, x > q_hi
    out[left] = np.exp(t3 * (q_lo - x[left]))
    out[right] = np.exp(-t3 * (x[right] - q_hi))
    return out


def tail_shift(grid: DensityGrid, t3: float, alpha_tail: float = 0.05) -> DensityGrid:
    """Divide by the log-linear tail kernel built on the grid's own alpha quantiles."""
    if not 0.0 < alpha_tail < 0.5:
        raise DomainError("tail quantile level must lie in (0, 0.5)")
    if t3 == 0.0:
        return grid
    m = tail_kernel(grid.returns, quantile(grid, alpha_tail), quantile(grid, 1.0 - alpha_tail), t3)
    return normalize(grid.with_pdf(grid.pdf / m))


def real_world_density(risk_adjusted: DensityGrid, state: SentimentState, alpha_tail: float = 0.05) -> DensityGrid:
    """Mean-variance shift followed by the tail shift, renormalized."""
    if state.is_neutral:
        return risk_adjusted
    mv = mean_variance_shift(risk_adjusted, state.theta1, state.theta2)
    return normalize(tail_shift(mv, state.theta3, alpha_tail))


@dataclass(frozen=True, eq=False)
class SentimentFunction:
    returns: np.ndarray
    psi: np.ndarray  # NaN where either density is below the floor
    defined: np.ndarray

    def real_world_kernel(self, rate: float, tau: float, marginal_utility) -> np.ndarray:
        """``exp(-r tau) u'(x) Psi(x)``."""
        return math.exp(-rate * tau) * np.asarray(marginal_utility(self.returns), dtype=float) * self.psi


def sentiment_function(risk_adjusted: DensityGrid, real_world: DensityGrid, floor: float = 1e-12) -> SentimentFunction:
    if risk_adjusted.returns.shape != real_world.returns.shape or not np.array_equal(
        risk_adjusted.returns, real_world.returns
    ):
        raise DomainError("sentiment function needs both densities on the same grid")
    ok = (risk_adjusted.pdf > floor) & (real_world.pdf > floor)
    psi = np.full(risk_adjusted.pdf.shape, np.nan)
    psi[ok] = risk_adjusted.pdf[ok] / real_world.pdf[ok]
    return SentimentFunction(risk_adjusted.returns, psi, ok)
