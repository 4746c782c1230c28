"""Cross-section calibration (sum of relative pricing errors) and the spline-based BLMALZ density."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import least_squares, minimize
from scipy.special import expit, logit
from scipy.stats import qmc

from .char_models import (
    MODEL_TYPES,
    ModelParams,
    StrikePricer,
    black76_call,
    implied_vol,
    param_names,
    price_european_call,
)
from .density import DensityGrid, GridSpec, normalize
from .errors import DataError, DomainError, InsufficientDataError, NumericalError
from .market_data import MIN_QUOTES, CrossSection, atm_implied_vol

log = logging.getLogger(__name__)

PARAM_BOXES: dict[str, dict[str, tuple[float, float]]] = {
    "LN": {"sigma": (1e-3, 3.0)},
    "HESTON": {
        "v0": (1e-4, 1.0), "vbar": (1e-4, 1.0), "kappa": (0.01, 10.0), "eta": (0.01, 3.0), "rho": (-0.999, 0.999),
    },
    "BATES": {
        "v0": (1e-4, 1.0), "vbar": (1e-4, 1.0), "kappa": (0.01, 10.0), "eta": (0.01, 3.0), "rho": (-0.999, 0.999),
        "lam": (0.0, 5.0), "mu_j": (-0.5, 0.5), "nu_j": (1e-3, 0.6),
    },
    "VG": {"sigma": (0.01, 1.0), "nu": (1e-3, 2.0), "theta": (-1.0, 1.0)},
}
_PENALTY = 1e12


@dataclass(frozen=True)
class CalibrationConfig:
    restarts: int = 5
    seed: int = 0
    # iteration budget of the final polishing search from the best restart
    max_iters: int = 500
    # iteration budget of each exploratory restart
    explore_iters: int = 120
    # exploratory end points handed to the least-squares polish
    polish_starts: int = 2
    # Latin-hypercube candidates screened per restart before the local searches
    candidates_per_restart: int = 8

    def __post_init__(self):
        if min(self.restarts, self.max_iters, self.explore_iters, self.candidates_per_restart,
               self.polish_starts) < 1:
            raise ValueError("restarts, iteration budgets and candidates_per_restart must be positive")


@dataclass(frozen=True)
class CalibrationResult:
    params: ModelParams
    sre: float
    iterations: int
    converged: bool
    restarts_used: int
    seed_sre: float = math.nan
    # largest single-quote relative error and its strike
    max_contribution: float = math.nan
    max_contribution_strike: float = math.nan


def _check_prices(section: CrossSection) -> np.ndarray:
    C = section.mids
    if np.any(C <= 0):
        raise DataError(f"{section.obs_date}: non-positive option mid reached calibration")
    return C


def relative_errors(model_prices, section: CrossSection) -> np.ndarray:
    C = _check_prices(section)
    return np.abs(C - np.asarray(model_prices)) / C


def sre_objective(params: ModelParams, section: CrossSection) -> float:
    """Sum over quotes of ``|C_i - model_i| / C_i``."""
    model = price_european_call(params, section.strikes, section.tau, section.forward, section.rate)
    return float(np.sum(relative_errors(model, section)))


class _Box:
    def __init__(self, kind: str):
        box = PARAM_BOXES[kind]
        self.kind, self.names = kind, param_names(kind)
        self.lo = np.array([box[n][0] for n in self.names])
        self.hi = np.array([box[n][1] for n in self.names])

    def from_unit(self, u):
        return self.lo + (self.hi - self.lo) * u

    def to_z(self, p):
        u = (np.asarray(p) - self.lo) / (self.hi - self.lo)
        return logit(np.clip(u, 1e-12, 1 - 1e-12))

    def from_z(self, z):
        return self.from_unit(expit(z))

    def build(self, p) -> ModelParams:
        return MODEL_TYPES[self.kind](*map(float, p))


def _nelder_mead(f, z0, max_iters: int, dim: int):
    return minimize(f, z0, method="Nelder-Mead",
                    options={"maxiter": max_iters, "maxfev": 2 * max_iters, "xatol": 1e-7,
                             "fatol": 1e-11, "adaptive": dim > 2})


def _least_squares_polish(box: _Box, pricer: StrikePricer, C: np.ndarray, p0, evals_per_dim: int = 60):
    def resid(p):
        try:
            model = box.build(p)
        except DomainError:
            return np.full(C.size, 1e3)
        with np.errstate(all="ignore"):
            r = (pricer(model) - C) / C
        return np.where(np.isfinite(r), r, 1e3)

    lo, hi = box.lo, box.hi
    x0 = np.clip(p0, lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo))
    try:
        res = least_squares(resid, x0, bounds=(lo, hi), x_scale=hi - lo, method="trf",
                            xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=evals_per_dim * len(x0), diff_step=1e-5)
    except (ValueError, NumericalError):
        return None
    return res.x


def calibrate(kind: str, section: CrossSection, config: CalibrationConfig = CalibrationConfig(),
              warm_start: ModelParams | None = None) -> CalibrationResult:
    """Multistart Nelder-Mead on the SRE in logistic box coordinates.

    Latin-hypercube candidates (plus ``warm_start`` if given) are screened,
    the best ``config.restarts`` seed short exploratory searches, and the
    winner is polished with fresh simplices until it stops improving.
    """
    kind = kind.upper()
    if kind not in PARAM_BOXES:
        raise DomainError(f"no calibration box for model {kind!r}")
    if len(section.quotes) < MIN_QUOTES:
        raise InsufficientDataError(f"{section.obs_date}: calibration needs {MIN_QUOTES} quotes, got {len(section.quotes)}")
    C = _check_prices(section)
    box = _Box(kind)
    try:
        scale = atm_implied_vol(section) * math.sqrt(section.tau)
    except NumericalError:
        scale = 0.2 * math.sqrt(section.tau)
    pricer = StrikePricer(section.strikes, section.tau, section.forward, section.rate, scale)

    def sre_at(p) -> float:
        try:
            model = box.build(p)  # VG restriction and other invariants reject here
        except DomainError:
            return _PENALTY
        with np.errstate(all="ignore"):
            try:
                val = float(np.sum(np.abs(C - pricer(model)) / C))
            except (NumericalError, FloatingPointError, OverflowError):
                return _PENALTY
        return val if math.isfinite(val) else _PENALTY

    def f_z(z):
        return sre_at(box.from_z(z))

    rng = np.random.default_rng(config.seed)
    sampler = qmc.LatinHypercube(d=len(box.names), seed=rng)
    cands = box.from_unit(sampler.random(config.restarts * config.candidates_per_restart))
    if warm_start is not None and warm_start.kind == kind:
        p0 = np.clip([getattr(warm_start, n) for n in box.names], box.lo, box.hi)
        cands = np.vstack([p0, cands])
    scores = np.array([sre_at(p) for p in cands])
    order = np.argsort(scores, kind="stable")[: config.restarts]
    dim = len(box.names)
    seed_p, seed_f = cands[order[0]], scores[order[0]]
    best_z, best_f, iters, improved = box.to_z(seed_p), seed_f, 0, False
    ends = []
    for j in order:
        res = _nelder_mead(f_z, box.to_z(cands[j]), config.explore_iters, dim)
        iters += int(res.nit)
        improved |= bool(res.fun < scores[j])
        ends.append((float(res.fun), res.x))
    # the L1 objective has kinks where simplices stall; a bounded least-squares
    # pass on the same relative residuals moves along the smooth valley, and
    # is kept only if it lowers the SRE
    ends.sort(key=lambda e: e[0])
    best_f, best_z = min((best_f, best_z), ends[0], key=lambda e: e[0])
    for f_end, z_end in ends[: config.polish_starts]:
        ls_p = _least_squares_polish(box, pricer, C, box.from_z(z_end))
        if ls_p is not None:
            f = sre_at(ls_p)
            if f < best_f:
                best_z, best_f = box.to_z(ls_p), f
    # curved valleys (variance level against mean reversion) need a longer run
    ls_p = _least_squares_polish(box, pricer, C, box.from_z(best_z), evals_per_dim=300)
    if ls_p is not None:
        f = sre_at(ls_p)
        if f < best_f:
            best_z, best_f = box.to_z(ls_p), f
    budget = config.max_iters
    while budget > 0 and best_f < _PENALTY:
        res = _nelder_mead(f_z, best_z, budget, dim)
        iters += int(res.nit)
        budget -= int(res.nit)
        gain = best_f - res.fun
        if res.fun < best_f:
            best_z, best_f = res.x, float(res.fun)
        if not gain > 1e-3 * best_f or best_f < 1e-12:
            break
    if best_f >= _PENALTY:
        raise NumericalError(f"{section.obs_date}: no admissible {kind} parameters found")
    params = box.build(box.from_z(best_z))
    # final numbers come from the adaptive pricer, not the fixed optimizer rule
    errs = relative_errors(price_european_call(params, section.strikes, section.tau, section.forward,
                                               section.rate), section)
    sre = float(errs.sum())
    seed_params = box.build(seed_p)
    seed_sre = sre_objective(seed_params, section)
    if seed_sre < sre:
        params, sre = seed_params, seed_sre
        errs = relative_errors(price_european_call(params, section.strikes, section.tau, section.forward,
                                                   section.rate), section)
    j = int(np.argmax(errs))
    if not improved:
        log.warning("%s %s calibration: no restart improved its seed (SRE %.4g)", section.obs_date, kind, sre)
    return CalibrationResult(params, sre, iters, improved or sre == 0.0, len(order), seed_sre,
                             float(errs[j]), float(section.strikes[j]))


# ---------------------------------------------------------------------------
# implied-volatility surface and the finite-difference density


@dataclass(frozen=True, eq=False)
class VolSurface:
    strikes: np.ndarray
    vols: np.ndarray
    spline: CubicSpline = field(repr=False)

    def __call__(self, strike):
        k = np.clip(np.asarray(strike, dtype=float), self.strikes[0], self.strikes[-1])
        out = np.maximum(self.spline(k), 1e-4)
        return float(out) if out.ndim == 0 else out


def build_vol_surface(section: CrossSection) -> VolSurface:
    """Natural cubic spline of Black-76 implied vols in strike, flat beyond the end knots."""
    K, iv = [], []
    for q in section.quotes:
        try:
            iv.append(implied_vol(q.mid, section.forward, q.strike, section.tau, section.rate))
            K.append(q.strike)
        except NumericalError as exc:
            log.warning("%s: dropping strike %s from vol surface (%s)", section.obs_date, q.strike, exc)
    if len(K) < 3:
        raise InsufficientDataError(f"{section.obs_date}: vol surface needs 3 invertible quotes, got {len(K)}")
    K, iv = np.array(K), np.array(iv)
    return VolSurface(K, iv, CubicSpline(K, iv, bc_type="natural"))


def blmalz_density(surface: VolSurface, section: CrossSection, delta_frac: float = 0.01, returns=None,
                   spec: GridSpec = GridSpec(), diagnostics: dict | None = None) -> DensityGrid:
    """Density from second differences of spline-implied call prices with step ``delta_frac * F``."""
    if not delta_frac > 0:
        raise DomainError("finite-difference step must be positive")
    F, tau, r = section.forward, section.tau, section.rate
    if returns is None:
        returns = spec.returns(float(surface(F)) * math.sqrt(tau))
    returns = np.asarray(returns, dtype=float)
    k = F * returns
    d = delta_frac * F
    floor = 1e-8 * F

    def call(strike):
        strike = np.maximum(strike, floor)
        return black76_call(F, strike, tau, r, surface(strike))

    g = math.exp(r * tau)
    # CDF(k) = 1 + e^{r tau} dC/dk by central difference; pdf is its central difference
    pdf_price = g * (call(k - d) - 2.0 * call(k) + call(k + d)) / d**2
    pdf = pdf_price * F
    total = float(np.trapezoid(np.abs(pdf), returns))
    clamped = float(np.trapezoid(np.maximum(-pdf, 0.0), returns))
    share = clamped / total if total > 0 else 0.0
    if share > 1e-3:
        log.warning("%s: BLMALZ clamped %.3g%% of mass", section.obs_date, 100 * share)
    if diagnostics is not None:
        diagnostics["clamped_mass"] = share
    grid = DensityGrid.from_pdf(returns, np.maximum(pdf, 0.0), F, tau)
    return normalize(grid)
