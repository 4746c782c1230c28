"""Density algebra on gross-return grids.

Every density in the package lives on a grid of gross returns ``x / F``
where ``F`` is the forward at the observation date. Price-space values are
recovered with the ``1 / F`` Jacobian when needed (log scores).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import DomainError, InsufficientDataError, NumericalError

if TYPE_CHECKING:
    from .market_data import CrossSection

log = logging.getLogger(__name__)

TRADING_DAYS = 252


@dataclass(frozen=True)
class GridSpec:
    """Gross-return grid: ``points`` nodes log-spaced over +/- ``width_sd`` log-sd."""

    points: int = 2048
    width_sd: float = 10.0

    def returns(self, sd_log: float) -> np.ndarray:
        if not sd_log > 0:
            raise DomainError(f"grid needs a positive log-return sd, got {sd_log}")
        half = self.width_sd * sd_log
        return np.exp(np.linspace(-half, half, self.points))


@dataclass(frozen=True, eq=False)
class DensityGrid:
    returns: np.ndarray
    pdf: np.ndarray
    cdf: np.ndarray
    forward: float
    horizon: float

    @classmethod
    def from_pdf(cls, returns, pdf, forward: float, horizon: float) -> "DensityGrid":
        returns = np.asarray(returns, dtype=float)
        pdf = np.asarray(pdf, dtype=float)
        if returns.shape != pdf.shape or returns.ndim != 1:
            raise DomainError("returns and pdf must be 1-d arrays of equal length")
        if np.any(np.diff(returns) <= 0):
            raise DomainError("grid returns must be strictly increasing")
        cdf = cumulative_trapezoid(pdf, returns, initial=0.0)
        return cls(returns, pdf, cdf, float(forward), float(horizon))

    def with_pdf(self, pdf) -> "DensityGrid":
        return DensityGrid.from_pdf(self.returns, pdf, self.forward, self.horizon)

    @property
    def prices(self) -> np.ndarray:
        return self.forward * self.returns

    def integral(self) -> float:
        return float(np.trapezoid(self.pdf, self.returns))

    def pdf_at(self, x) -> np.ndarray:
        return np.interp(x, self.returns, self.pdf, left=0.0, right=0.0)


def normalize(grid: DensityGrid) -> DensityGrid:
    total = grid.integral()
    if not total > 1e-300:
        raise NumericalError(f"degenerate density: integral {total!r}")
    return grid.with_pdf(grid.pdf / total)


def moments(grid: DensityGrid) -> tuple[float, float, float, float]:
    """Mean, variance, skewness and kurtosis of the gross return."""
    x, f = grid.returns, grid.pdf
    mean = float(np.trapezoid(x * f, x))
    dev = x - mean
    var = float(np.trapezoid(dev**2 * f, x))
    m3 = float(np.trapezoid(dev**3 * f, x))
    m4 = float(np.trapezoid(dev**4 * f, x))
    return mean, var, m3 / var**1.5, m4 / var**2


def quantile(grid: DensityGrid, p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {p}")
    cdf = grid.cdf
    # first index where the cdf reaches p; interpolate inside that cell
    j = int(np.searchsorted(cdf, p, side="left"))
    j = min(max(j, 1), len(cdf) - 1)
    c0, c1 = cdf[j - 1], cdf[j]
    x0, x1 = grid.returns[j - 1], grid.returns[j]
    if c1 <= c0:
        return float(x1)
    return float(x0 + (p - c0) * (x1 - x0) / (c1 - c0))


def cdf_at(grid: DensityGrid, x):
    """Interpolated CDF; this is the PIT when ``x`` is the realized return."""
    out = np.interp(x, grid.returns, grid.cdf, left=0.0, right=1.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if np.ndim(out) == 0 else out


def utility_adjust(grid: DensityGrid, marginal_utility: Callable[[np.ndarray], np.ndarray]) -> DensityGrid:
    """Risk-adjusted density ``f / u'`` renormalized."""
    mu = np.asarray(marginal_utility(grid.returns), dtype=float)
    if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
        raise DomainError("marginal utility must be finite and positive on the grid support")
    return normalize(grid.with_pdf(grid.pdf / mu))


def crra_adjust(grid: DensityGrid, gamma: float) -> DensityGrid:
    """Power-utility tilt ``x**gamma * f`` renormalized."""
    lo, hi = math.log(grid.returns[0]), math.log(grid.returns[-1])
    if max(gamma * lo, gamma * hi) > 700.0:
        raise DomainError(f"CRRA tilt overflows for gamma={gamma}")
    tilt = grid.returns**gamma
    return normalize(grid.with_pdf(grid.pdf * tilt))


def crra_kernel(returns, gamma: float, rate: float = 0.0, tau: float = 0.0) -> np.ndarray:
    return math.exp(-rate * tau) * np.asarray(returns, dtype=float) ** (-gamma)


@dataclass(frozen=True)
class BkmMoments:
    vol: float
    skew: float
    kurt: float
    V: float
    W: float
    X: float
    mu: float
    tau: float

    @property
    def horizon_sd(self) -> float:
        return self.vol * math.sqrt(self.tau)


def _otm_curve(section: "CrossSection") -> tuple[np.ndarray, np.ndarray]:
    """Strike grid (with the forward inserted) and OTM option values."""
    K = np.array([q.strike for q in section.quotes], dtype=float)
    C = np.array([q.mid for q in section.quotes], dtype=float)
    F, disc = section.forward, math.exp(-section.rate * section.tau)
    if not (K[0] < F < K[-1]) and F not in K:
        raise InsufficientDataError("BKM moments need strikes on both sides of the forward")
    if F not in K:
        c_f = float(np.interp(F, K, C))
        j = int(np.searchsorted(K, F))
        K = np.insert(K, j, F)
        C = np.insert(C, j, c_f)
    otm = np.where(K < F, C - disc * (F - K), C)
    return K, otm


def bkm_moments(section: "CrossSection") -> BkmMoments:
    """Model-free risk-neutral moments from out-of-the-money option values.

    The forward plays the role of the underlying, so the log return has
    ``E[exp(R)] = 1`` and the drift term of the spot formulation vanishes.
    """
    if len(section.quotes) < 8:
        raise InsufficientDataError("BKM moments need at least 8 quotes")
    K, otm = _otm_curve(section)
    F, r, tau = section.forward, section.rate, section.tau
    y = np.log(K / F)
    V = float(np.trapezoid(2.0 * (1.0 - y) / K**2 * otm, K))
    W = float(np.trapezoid((6.0 * y - 3.0 * y**2) / K**2 * otm, K))
    X = float(np.trapezoid((12.0 * y**2 - 4.0 * y**3) / K**2 * otm, K))
    g = math.exp(r * tau)
    mu = -g * (V / 2.0 + W / 6.0 + X / 24.0)
    var = g * V - mu**2
    if not var > 0:
        raise NumericalError(f"non-positive BKM variance {var:.3e} (V={V:.3e}, mu={mu:.3e})")
    skew = (g * W - 3.0 * mu * g * V + 2.0 * mu**3) / var**1.5
    kurt = (g * X - 4.0 * mu * g * W + 6.0 * g * mu**2 * V - 3.0 * mu**4) / var**2
    return BkmMoments(math.sqrt(var / tau), skew, kurt, V, W, X, mu, tau)


def irra_objective(gamma, variance_spread: float, sd_q: float, skew: float, kurt: float):
    return variance_spread - gamma * sd_q * skew - 0.5 * gamma**2 * sd_q**2 * (kurt - 3.0)


def irra_estimate(bkm: BkmMoments, physical_var: float, bounds: tuple[float, float] = (-1.0, 6.0)) -> float:
    """Implied relative risk aversion from the physical/risk-neutral variance spread.

    ``physical_var`` and the risk-neutral moments are horizon-scaled.
    """
    lo, hi = bounds
    sd_q = bkm.horizon_sd
    if not sd_q > 0:
        raise DomainError("risk-neutral volatility must be positive")
    spread = (physical_var - sd_q**2) / sd_q**2
    a = 0.5 * sd_q**2 * (bkm.kurt - 3.0)
    b = sd_q * bkm.skew
    roots: list[float] = []
    if abs(a) < 1e-15:
        if b != 0:
            roots = [spread / b]
    else:
        disc = b * b + 4.0 * a * spread
        if disc >= 0:
            sq = math.sqrt(disc)
            roots = [(-b + sq) / (2 * a), (-b - sq) / (2 * a)]
    inside = [g for g in roots if lo <= g <= hi]
    if inside:
        return min(inside, key=lambda g: (abs(irra_objective(g, spread, sd_q, bkm.skew, bkm.kurt)), abs(g)))
    grid = np.round(np.arange(lo, hi + 5e-4, 1e-3), 3)
    eps2 = irra_objective(grid, spread, sd_q, bkm.skew, bkm.kurt) ** 2
    gamma = float(np.clip(grid[int(np.argmin(eps2))], lo, hi))
    if gamma in (lo, hi):
        log.info("IRRA estimate at bound %.3f (no admissible root; eps=%.4g)", gamma,
                 irra_objective(gamma, spread, sd_q, bkm.skew, bkm.kurt))
    return gamma


def realized_variance(prices, tau: float, window: int = 30) -> float:
    """Horizon-scaled variance of daily log returns over the last ``window`` days."""
    p = np.asarray(prices, dtype=float)
    if p.size < window + 1:
        raise InsufficientDataError(f"need {window + 1} closes, got {p.size}")
    rets = np.diff(np.log(p[-(window + 1):]))
    return float(np.var(rets) * TRADING_DAYS * tau)
