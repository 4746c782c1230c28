"""Forecast scoring: log score, CRPS, PIT-based tests, the integrated score and PIT recalibration."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr, ndtri

from .density import DensityGrid, cdf_at, normalize
from .errors import DomainError, InsufficientDataError
from .sentiment import silverman_bandwidth

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-300
PIT_CLIP = 1e-10
MIN_TEST_N = 20
PASS_LEVEL = 0.05


@dataclass(frozen=True, eq=False)
class ForecastRecord:
    obs_date: date
    model_id: str
    density: DensityGrid
    realization: float  # gross return settlement / forward

    def __post_init__(self):
        if not self.realization > 0:
            raise DomainError("realization must be a positive gross return")


def log_density(record: ForecastRecord) -> tuple[float, bool]:
    """Price-space log density at the realization and whether it hit the floor."""
    f = float(record.density.pdf_at(record.realization)) / record.density.forward
    if f < LOG_FLOOR:
        return math.log(LOG_FLOOR), True
    return math.log(f), False


def log_score(ensemble: Sequence[ForecastRecord]) -> float:
    total, floored = 0.0, 0
    for rec in ensemble:
        v, hit = log_density(rec)
        total += v
        floored += hit
    if floored:
        log.warning("log score: %d realization(s) at zero forecast density (floored)", floored)
    return total


def crps_single(density: DensityGrid, realization: float) -> float:
    """Integral of (CDF(x) - 1{x >= realization})^2 over the return grid, in return units."""
    x, F = density.returns, np.clip(density.cdf, 0.0, 1.0)
    y = float(realization)
    out = 0.0
    if y <= x[0]:
        out += x[0] - y
        return out + float(np.trapezoid((1.0 - F) ** 2, x))
    if y >= x[-1]:
        out += y - x[-1]
        return out + float(np.trapezoid(F**2, x))
    j = int(np.searchsorted(x, y))
    Fy = float(np.interp(y, x, F))
    left_x, left_F = np.append(x[:j], y), np.append(F[:j], Fy)
    right_x, right_F = np.insert(x[j:], 0, y), np.insert(F[j:], 0, Fy)
    return float(np.trapezoid(left_F**2, left_x) + np.trapezoid((1.0 - right_F) ** 2, right_x))


def crps_aggregate(ensemble: Sequence[ForecastRecord]) -> float:
    """Mean over dates of the square root of the per-date CRPS integral."""
    if not ensemble:
        raise InsufficientDataError("CRPS needs a non-empty ensemble")
    return float(np.mean([math.sqrt(crps_single(r.density, r.realization)) for r in ensemble]))


def pit_series(ensemble: Sequence[ForecastRecord]) -> tuple[np.ndarray, np.ndarray]:
    pits = np.array([cdf_at(r.density, r.realization) for r in ensemble], dtype=float)
    t_pits = ndtri(np.clip(pits, PIT_CLIP, 1.0 - PIT_CLIP))
    return pits, t_pits


def _check_n(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.size < MIN_TEST_N:
        raise InsufficientDataError(f"tests need at least {MIN_TEST_N} T-PITs, got {z.size}")
    return z


def berkowitz_lr3(t_pits) -> float:
    """Likelihood-ratio p-value of (mean 0, variance 1, no autocorrelation) in a Gaussian AR(1).

    Conditional likelihood on observations 2..N; the unrestricted fit is OLS.
    """
    z = _check_n(t_pits)
    y, ylag = z[1:], z[:-1]
    n = y.size
    X = np.column_stack([np.ones(n), ylag])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    s2 = float(resid @ resid / n)
    if s2 < 1e-12:
        return 0.0
    ll_free = -0.5 * n * (math.log(2 * math.pi * s2) + 1.0)
    ll_null = -0.5 * n * math.log(2 * math.pi) - 0.5 * float(y @ y)
    lr = max(-2.0 * (ll_null - ll_free), 0.0)
    return float(stats.chi2.sf(lr, 3))


def jarque_bera(t_pits) -> float:
    z = _check_n(t_pits)
    return float(stats.jarque_bera(z).pvalue)


def ks_normal(t_pits) -> float:
    z = _check_n(t_pits)
    return float(stats.kstest(z, "norm", method="asymp").pvalue)


@dataclass(frozen=True, eq=False)
class ScoreSummary:
    model: str
    total_log_score: float
    crps_mean: float
    pits: np.ndarray
    t_pits: np.ndarray
    p_lr3: float
    p_jb: float
    p_ks: float
    log_scores: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    crps_values: np.ndarray = field(repr=False, default_factory=lambda: np.empty(0))
    l_bar: float = math.nan
    crps_bar: float = math.nan
    stat_bar: float = math.nan
    ifs: float = math.nan

    @property
    def n(self) -> int:
        return int(self.pits.size)


def summarize(model: str, ensemble: Sequence[ForecastRecord]) -> ScoreSummary:
    scores = np.array([log_density(r)[0] for r in ensemble])
    if np.any(scores <= math.log(LOG_FLOOR)):
        log.warning("%s: %d realization(s) at zero forecast density (floored)", model,
                    int(np.sum(scores <= math.log(LOG_FLOOR))))
    roots = np.array([math.sqrt(crps_single(r.density, r.realization)) for r in ensemble])
    pits, t_pits = pit_series(ensemble)
    return ScoreSummary(model, float(scores.sum()), float(roots.mean()), pits, t_pits,
                        berkowitz_lr3(t_pits), jarque_bera(t_pits), ks_normal(t_pits), scores, roots)


def _normal_rank(values: np.ndarray, sign: float) -> np.ndarray:
    sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    if not sd > 0:
        return np.full(values.size, 0.5)
    return ndtr(sign * (values - values.mean()) / sd)


def _pooled_rank(totals: np.ndarray, per_date: list[np.ndarray], sign: float, root_mean: bool) -> np.ndarray:
    """Each model's aggregate against the CLT law of an aggregate of pooled per-date scores."""
    pool = np.concatenate(per_date)
    sd = float(np.std(pool, ddof=1)) if pool.size > 1 else 0.0
    out = np.full(totals.size, 0.5)
    if not sd > 0:
        return out
    for i, (tot, vals) in enumerate(zip(totals, per_date)):
        n = vals.size
        if root_mean:
            z = (tot - pool.mean()) / (sd / math.sqrt(n))
        else:
            z = (tot - n * pool.mean()) / (sd * math.sqrt(n))
        out[i] = ndtr(sign * z)
    return out


def stat_scores(summaries: Sequence[ScoreSummary]) -> np.ndarray:
    """0.25 per test passed at 5% plus 0.25 times the mean linear p-value rank (best p -> 1)."""
    P = np.array([[s.p_lr3, s.p_jb, s.p_ks] for s in summaries], dtype=float)
    passed = (P >= PASS_LEVEL).sum(axis=1)
    lo, hi = P.min(axis=0), P.max(axis=0)
    span = hi - lo
    rank = np.where(span > 0, (P - lo) / np.where(span > 0, span, 1.0), 0.5)
    return 0.25 * passed + 0.25 * rank.mean(axis=1)


def ifs(summaries: Sequence[ScoreSummary], normalization: str = "cross_model") -> list[ScoreSummary]:
    """Normalized accuracy, error and consistency scores and their average."""
    if len(summaries) < 2:
        raise InsufficientDataError("the integrated score needs at least two models")
    L = np.array([s.total_log_score for s in summaries])
    C = np.array([s.crps_mean for s in summaries])
    if normalization == "cross_model":
        l_bar, c_bar = _normal_rank(L, 1.0), _normal_rank(C, -1.0)
    elif normalization == "within_model":
        l_bar = _pooled_rank(L, [s.log_scores for s in summaries], 1.0, root_mean=False)
        c_bar = _pooled_rank(C, [s.crps_values for s in summaries], -1.0, root_mean=True)
    else:
        raise DomainError(f"unknown IFS normalization {normalization!r}")
    st = stat_scores(summaries)
    return [
        replace(s, l_bar=float(a), crps_bar=float(b), stat_bar=float(c), ifs=float((a + b + c) / 3.0))
        for s, a, b, c in zip(summaries, l_bar, c_bar, st)
    ]


# ---------------------------------------------------------------------------
# recalibration against past PIT mistakes


def _kde(samples: np.ndarray, z: np.ndarray) -> np.ndarray:
    h = silverman_bandwidth(samples)
    if not h > 0:
        h = 1e-3
    u = (z[:, None] - samples[None, :]) / h
    return np.exp(-0.5 * u * u).sum(axis=1) / (samples.size * h * math.sqrt(2 * math.pi))


def calibration_function(past_t_pits, z) -> np.ndarray:
    """``h(z) / phi(z)`` with ``h`` a Silverman-bandwidth Gaussian KDE of past T-PITs."""
    samples = np.asarray(past_t_pits, dtype=float)
    z = np.asarray(z, dtype=float)
    phi = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return _kde(samples, z) / phi


def recalibrate(risk_adjusted: DensityGrid, past_t_pits, min_history: int = 24) -> DensityGrid:
    """Reweight the forecast by the empirical calibration function of its past T-PITs."""
    past = np.asarray(past_t_pits, dtype=float)
    if past.size < min_history:
        log.warning("recalibration skipped: %d past T-PITs, %d required", past.size, min_history)
        return risk_adjusted
    z = ndtri(np.clip(risk_adjusted.cdf, PIT_CLIP, 1.0 - PIT_CLIP))
    c = calibration_function(past, z)
    return normalize(risk_adjusted.with_pdf(risk_adjusted.pdf * c))
