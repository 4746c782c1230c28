"""Characteristic functions, Gil-Pelaez inversion and European call pricing.

All models are written for the log forward return ``X = ln(F_T / F)`` under
the forward measure, so ``phi(-i) = 1``. The characteristic function of
``ln F_T`` is ``exp(i w ln F) * phi(w)``.
"""
from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import ClassVar, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .density import DensityGrid, GridSpec
from .errors import DomainError, NumericalError


@dataclass(frozen=True)
class Lognormal:
    sigma: float
    kind: ClassVar[str] = "LN"

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"LN sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class Heston:
    v0: float
    vbar: float
    kappa: float
    eta: float
    rho: float
    kind: ClassVar[str] = "HESTON"

    def __post_init__(self):
        _check_heston(self)


@dataclass(frozen=True)
class Bates:
    v0: float
    vbar: float
    kappa: float
    eta: float
    rho: float
    lam: float
    mu_j: float
    nu_j: float
    kind: ClassVar[str] = "BATES"

    def __post_init__(self):
        _check_heston(self)
        if self.lam < 0 or self.nu_j < 0:
            raise DomainError("Bates jump intensity and jump std must be non-negative")

    @property
    def diffusion(self) -> Heston:
        return Heston(self.v0, self.vbar, self.kappa, self.eta, self.rho)


@dataclass(frozen=True)
class VarianceGamma:
    sigma: float
    nu: float
    theta: float
    kind: ClassVar[str] = "VG"

    def __post_init__(self):
        if not (self.sigma > 0 and self.nu > 0):
            raise DomainError("VG sigma and nu must be positive")
        # martingale correction needs 1/nu > theta + sigma^2/2
        if not 1.0 / self.nu > self.theta + 0.5 * self.sigma**2:
            raise DomainError(
                f"VG restriction 1/nu > theta + sigma^2/2 violated "
                f"(nu={self.nu}, theta={self.theta}, sigma={self.sigma})"
            )

    @property
    def omega(self) -> float:
        return math.log(1.0 - self.theta * self.nu - 0.5 * self.sigma**2 * self.nu) / self.nu


ModelParams = Union[Lognormal, Heston, Bates, VarianceGamma]
MODEL_TYPES = {cls.kind: cls for cls in (Lognormal, Heston, Bates, VarianceGamma)}


def _check_heston(p) -> None:
    if p.v0 < 0 or p.vbar < 0 or p.kappa < 0 or p.eta < 0:
        raise DomainError("Heston variances, mean reversion and vol-of-variance must be non-negative")
    if not -1.0 <= p.rho <= 1.0:
        raise DomainError(f"correlation must lie in [-1, 1], got {p.rho}")


def param_names(model_or_kind) -> tuple[str, ...]:
    if isinstance(model_or_kind, str):
        cls = MODEL_TYPES[model_or_kind]
    else:
        cls = model_or_kind if isinstance(model_or_kind, type) else type(model_or_kind)
    return tuple(f.name for f in fields(cls))


def params_to_dict(model: ModelParams) -> dict:
    return {"kind": model.kind, **dict(zip(param_names(model), astuple(model)))}


def params_from_dict(d: dict) -> ModelParams:
    cls = MODEL_TYPES[d["kind"]]
    return cls(**{k: float(d[k]) for k in param_names(cls)})


# ---------------------------------------------------------------------------
# characteristic functions of the log forward return


def _heston_log_cf(u, tau, v0, vbar, kappa, eta, rho):
    """log phi for Heston in a form that is continuous in u and stable as eta -> 0."""
    iu = 1j * u
    q = iu + u * u
    beta = kappa - rho * eta * iu
    d = np.sqrt(beta * beta + eta * eta * q)
    bd = beta + d
    n_over = -q / bd  # (beta - d) / eta^2
    g = eta * eta * n_over / bd  # (beta - d) / (beta + d)
    e = np.exp(-d * tau)
    D = n_over * (1.0 - e) / (1.0 - g * e)
    z_over = n_over / bd * (1.0 - e) / (1.0 - g)  # z / eta^2
    z = eta * eta * z_over
    small = np.abs(z) < 1e-8
    ratio = np.where(small, 1.0 - 0.5 * z, np.log1p(np.where(small, 0.0, z)) / np.where(small, 1.0, z))
    C = kappa * vbar * (n_over * tau - 2.0 * ratio * z_over)
    return C + D * v0


def log_cf(model: ModelParams, u, tau: float):
    """Log characteristic function of ``ln(F_T / F)`` at (complex) frequencies ``u``."""
    u = np.asarray(u, dtype=complex)
    if isinstance(model, Lognormal):
        v = model.sigma**2 * tau
        return -0.5 * v * (1j * u + u * u)
    if isinstance(model, Heston):
        return _heston_log_cf(u, tau, model.v0, model.vbar, model.kappa, model.eta, model.rho)
    if isinstance(model, Bates):
        out = _heston_log_cf(u, tau, model.v0, model.vbar, model.kappa, model.eta, model.rho)
        if model.lam > 0:
            jump = np.exp(1j * u * model.mu_j - 0.5 * u * u * model.nu_j**2) - 1.0
            comp = math.expm1(model.mu_j + 0.5 * model.nu_j**2)
            out = out + model.lam * tau * (jump - 1j * u * comp)
        return out
    if isinstance(model, VarianceGamma):
        base = 1.0 - 1j * u * model.theta * model.nu + 0.5 * model.sigma**2 * model.nu * u * u
        return 1j * u * model.omega * tau - (tau / model.nu) * np.log(base)
    raise DomainError(f"unknown model {model!r}")


def characteristic_function(model: ModelParams, w, tau: float, forward: float):
    """``E[exp(i w ln F_T)]`` with ``E[F_T] = forward``."""
    if not tau > 0 or not forward > 0:
        raise DomainError("characteristic function needs tau > 0 and forward > 0")
    w = np.asarray(w, dtype=complex)
    out = np.exp(1j * w * math.log(forward) + log_cf(model, w, tau))
    return complex(out) if out.ndim == 0 else out


def log_variance(model: ModelParams, tau: float) -> float:
    """Approximate variance of the log forward return, used for scaling only."""
    if isinstance(model, Lognormal):
        return model.sigma**2 * tau
    if isinstance(model, (Heston, Bates)):
        k = model.kappa
        frac = tau if k * tau < 1e-8 else -math.expm1(-k * tau) / k
        v = model.vbar * tau + (model.v0 - model.vbar) * frac
        if isinstance(model, Bates):
            v += model.lam * tau * (model.mu_j**2 + model.nu_j**2)
        return max(v, 1e-12)
    if isinstance(model, VarianceGamma):
        return (model.sigma**2 + model.theta**2 * model.nu) * tau
    raise DomainError(f"unknown model {model!r}")


# ---------------------------------------------------------------------------
# Gil-Pelaez quadrature

_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
TRUNC_TOL = 1e-12
U_CAP = 500.0
QUAD_TOL = 1e-10
MAX_REFINE = 4
FILTER_ALPHA = 36.0
FILTER_ORDER = 8
_CHUNK = 1 << 22


@dataclass(frozen=True)
class _Rule:
    w: np.ndarray
    wt: np.ndarray


_LADDER = 2.0 * 1.25 ** np.arange(int(math.ceil(math.log(U_CAP / 2.0) / math.log(1.25))))
_LADDER = _LADDER[_LADDER < U_CAP]


def _truncation(model, tau, scale, with_share) -> float:
    """Smallest ladder point u (scaled frequency) with |phi|/u below tolerance at u and 1.5u."""
    u = np.concatenate([_LADDER, 1.5 * _LADDER])
    w = u / scale
    with np.errstate(over="ignore", under="ignore"):
        mag = np.abs(np.exp(log_cf(model, w, tau)))
        if with_share:
            mag = np.maximum(mag, np.abs(np.exp(log_cf(model, w - 1j, tau))))
    ok = mag / u < TRUNC_TOL
    n = _LADDER.size
    both = ok[:n] & ok[n:]
    if not both.any():
        return U_CAP
    return float(_LADDER[int(np.argmax(both))])


def _rule(upper: float, width: float, scale: float) -> _Rule:
    n = max(1, math.ceil(upper / width))
    h = upper / n
    left = np.arange(n) * h
    u = (left[:, None] + 0.5 * h * (_GL_X + 1.0)).ravel()
    wt = np.tile(0.5 * h * _GL_W, n)
    return _Rule(u / scale, wt / scale)


def _apply(rule: _Rule, values: list[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Sum_j E[x, j] * v[j] with E = exp(-i w x); one column per vector in ``values``."""
    V = np.stack(values, axis=1)
    if x.size > 256:
        step = np.diff(x)
        if np.allclose(step, step[0], rtol=1e-9, atol=0.0):
            return _apply_uniform(rule.w, V, x[0], float(step[0]), x.size)
    out = np.empty((x.size, V.shape[1]), dtype=complex)
    step = max(1, _CHUNK // max(rule.w.size, 1))
    for i in range(0, x.size, step):
        E = np.exp(-1j * np.outer(x[i:i + step], rule.w))
        out[i:i + step] = E @ V
    return out


def _apply_uniform(w, V, x0, dx, m):
    # x_k = x0 + (b*B + l) dx: exp(-i w x_k) factors into a row block and a block shift
    B = int(math.ceil(math.sqrt(m)))
    nb = int(math.ceil(m / B))
    A = np.exp(-1j * np.outer(x0 + dx * np.arange(B), w))
    S = np.exp(-1j * np.outer(w, dx * B * np.arange(nb)))
    out = np.empty((m, V.shape[1]), dtype=complex)
    for c in range(V.shape[1]):
        R = A @ (S * V[:, c][:, None])
        out[:, c] = R.T.ravel()[:m]
    return out


class _Inversion:
    """Adaptive panel Gauss-Legendre rule for one (model, tau)."""

    def __init__(self, model: ModelParams, tau: float, with_share: bool):
        self.model, self.tau, self.with_share = model, tau, with_share
        self.scale = math.sqrt(log_variance(model, tau))
        self.upper = _truncation(model, tau, self.scale, with_share)
        # slowly decaying transforms (VG with tau/nu small) hit the cap; an
        # exponential spectral filter removes the truncation ringing
        self.filtered = self.upper >= U_CAP

    def _vectors(self, rule: _Rule, pdf: bool) -> list[np.ndarray]:
        wt = rule.wt
        if self.filtered:
            wt = wt * np.exp(-FILTER_ALPHA * (rule.w * self.scale / self.upper) ** FILTER_ORDER)
        phi = np.exp(log_cf(self.model, rule.w, self.tau))
        vecs = [wt * phi / rule.w]
        if self.with_share:
            vecs.append(wt * np.exp(log_cf(self.model, rule.w - 1j, self.tau)) / rule.w)
        if pdf:
            vecs.append(wt * phi)
        return vecs

    def _width(self, x: np.ndarray) -> float:
        reach = (np.max(np.abs(x)) if x.size else 0.0) / self.scale + 1.0
        return min(1.0, 2.0 / reach)

    def select(self, x: np.ndarray, adaptive: bool = True) -> _Rule:
        width = self._width(x)
        rule = _rule(self.upper, width, self.scale)
        if not adaptive:
            return rule
        prev = _apply(rule, self._vectors(rule, False), x)
        for _ in range(MAX_REFINE):
            width /= 2.0
            finer = _rule(self.upper, width, self.scale)
            cur = _apply(finer, self._vectors(finer, False), x)
            err = np.max(np.abs(cur.imag - prev.imag), axis=1) / math.pi
            if np.all(err < QUAD_TOL):
                return finer
            prev, rule = cur, finer
        worst = int(np.argmax(err))
        raise NumericalError(
            f"Gil-Pelaez quadrature did not converge (err {err[worst]:.2e}) at log-moneyness {x[worst]:.6g}",
            where=float(x[worst]),
        )

    def evaluate(self, x: np.ndarray, rule: _Rule, pdf: bool = False) -> np.ndarray:
        return _apply(rule, self._vectors(rule, pdf), x)


_PROBE = 65


def _probe_points(x: np.ndarray) -> np.ndarray:
    if x.size <= _PROBE:
        return x
    return x[np.linspace(0, x.size - 1, _PROBE).astype(int)]


def cdf_from_cf(model: ModelParams, strikes, tau: float, forward: float, adaptive: bool = True) -> np.ndarray:
    """Risk-neutral CDF of ``F_T`` at ``strikes`` by Gil-Pelaez inversion."""
    if not tau > 0 or not forward > 0:
        raise DomainError("cdf_from_cf needs tau > 0 and forward > 0")
    k = np.asarray(strikes, dtype=float)
    if np.any(k <= 0):
        raise DomainError("strikes must be positive")
    x = np.log(k / forward)
    inv = _Inversion(model, tau, with_share=False)
    rule = inv.select(_probe_points(x), adaptive)
    i2 = inv.evaluate(x, rule)[:, 0].imag
    cdf = np.clip(0.5 - i2 / math.pi, 0.0, 1.0)
    return cdf


def _cdf_pdf_log(model, tau, x, adaptive=True):
    inv = _Inversion(model, tau, with_share=False)
    rule = inv.select(_probe_points(x), adaptive)
    res = inv.evaluate(x, rule, pdf=True)
    return 0.5 - res[:, 0].imag / math.pi, res[:, 1].real / math.pi


def density_from_model(model: ModelParams, tau: float, forward: float, returns=None,
                       spec: GridSpec = GridSpec()) -> DensityGrid:
    """Risk-neutral density on a gross-return grid.

    The pdf is the exact derivative of the quadrature CDF, i.e. the
    zero-step limit of its central differences.
    """
    from .density import normalize

    if returns is None:
        returns = spec.returns(math.sqrt(log_variance(model, tau)))
    returns = np.asarray(returns, dtype=float)
    x = np.log(returns)
    _, pdf_log = _cdf_pdf_log(model, tau, x)
    pdf = pdf_log / returns
    if pdf.min() < -1e-10 * max(1.0, pdf.max()):
        j = int(np.argmin(pdf))
        raise NumericalError(f"negative density {pdf[j]:.3e} at gross return {returns[j]:.6g}",
                             where=float(returns[j]))
    grid = DensityGrid.from_pdf(returns, np.maximum(pdf, 0.0), forward, tau)
    return normalize(grid)


def exercise_probabilities(model: ModelParams, strikes, tau: float, forward: float,
                           adaptive: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(P1, P2): share-measure and forward-measure probabilities of finishing above K."""
    k = np.atleast_1d(np.asarray(strikes, dtype=float))
    if np.any(k <= 0):
        raise DomainError("strikes must be positive")
    x = np.log(k / forward)
    inv = _Inversion(model, tau, with_share=True)
    rule = inv.select(_probe_points(x), adaptive)
    res = inv.evaluate(x, rule)
    p2 = 0.5 + res[:, 0].imag / math.pi
    p1 = 0.5 + res[:, 1].imag / math.pi
    return p1, p2


def price_european_call(model: ModelParams, strikes, tau: float, forward: float, rate: float,
                        adaptive: bool = True):
    """Discounted call values ``exp(-r tau) (F P1 - K P2)``."""
    if not tau > 0 or not forward > 0:
        raise DomainError("pricing needs tau > 0 and forward > 0")
    scalar = np.ndim(strikes) == 0
    k = np.atleast_1d(np.asarray(strikes, dtype=float))
    p1, p2 = exercise_probabilities(model, k, tau, forward, adaptive)
    out = math.exp(-rate * tau) * (forward * p1 - k * p2)
    return float(out[0]) if scalar else out


class StrikePricer:
    """Repeated pricing of one strike ladder, as needed inside an optimizer.

    Panels are laid out once in units of a fixed reference scale (usually
    the ATM log-sd of the section), so the Fourier kernel ``exp(-i w x)`` is
    computed once and every model evaluation costs one pass over the
    characteristic function. Only the truncation point depends on the model.
    """

    def __init__(self, strikes, tau: float, forward: float, rate: float, scale: float):
        if not (tau > 0 and forward > 0 and scale > 0):
            raise DomainError("StrikePricer needs positive tau, forward and scale")
        self.strikes = np.asarray(strikes, dtype=float)
        self.tau, self.forward, self.rate, self.scale = tau, forward, rate, scale
        x = np.log(self.strikes / forward)
        # at most ~3 radians of kernel phase per 8-node panel
        self.width = min(1.0, 3.0 / (np.max(np.abs(x)) / scale + 1.0))
        n_panels = math.ceil(U_CAP / self.width)
        left = np.arange(n_panels) * self.width
        u = (left[:, None] + 0.5 * self.width * (_GL_X + 1.0)).ravel()
        self.u = u
        self.w = u / scale
        self.wt = np.tile(0.5 * self.width * _GL_W, n_panels) / scale
        self.kernel = np.exp(-1j * np.outer(x, self.w))

    def __call__(self, model: ModelParams) -> np.ndarray:
        upper = _truncation(model, self.tau, self.scale, True)
        n = 8 * math.ceil(upper / self.width)
        w, wt = self.w[:n], self.wt[:n]
        if upper >= U_CAP:
            wt = wt * np.exp(-FILTER_ALPHA * (self.u[:n] / upper) ** FILTER_ORDER)
        phi = np.exp(log_cf(model, np.concatenate([w, w - 1j]), self.tau))
        V = (wt / w)[:, None] * phi.reshape(2, n).T
        res = (self.kernel[:, :n] @ V).imag / math.pi
        p2, p1 = 0.5 + res[:, 0], 0.5 + res[:, 1]
        return math.exp(-self.rate * self.tau) * (self.forward * p1 - self.strikes * p2)


# ---------------------------------------------------------------------------
# Black-76


def black76_call(forward, strike, tau, rate, sigma):
    F = np.asarray(forward, dtype=float)
    K = np.asarray(strike, dtype=float)
    sig = np.asarray(sigma, dtype=float)
    v = sig * math.sqrt(tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(F / K) + 0.5 * v * v) / v
    d2 = d1 - v
    out = math.exp(-rate * tau) * (F * ndtr(d1) - K * ndtr(d2))
    return float(out) if out.ndim == 0 else out


def implied_vol(price: float, forward: float, strike: float, tau: float, rate: float,
                lo: float = 1e-4, hi: float = 5.0) -> float:
    """Black-76 implied volatility by bracketed root finding on [lo, hi]."""
    f = lambda s: black76_call(forward, strike, tau, rate, s) - price  # noqa: E731
    flo, fhi = f(lo), f(hi)
    if not flo * fhi < 0:
        if flo == 0:
            return lo
        raise NumericalError(
            f"implied vol not bracketed for strike {strike} price {price} (range [{lo}, {hi}])",
            where=strike,
        )
    return brentq(f, lo, hi, xtol=1e-14, rtol=1e-14, maxiter=200)
