"""End-to-end out-of-sample study over monthly option cross-sections."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path

import numpy as np

from .calibration import build_vol_surface, blmalz_density, calibrate
from .char_models import Lognormal, ModelParams, density_from_model, params_to_dict
from .config import CRRA_GAMMAS, StudyConfig
from .density import BkmMoments, DensityGrid, bkm_moments, crra_adjust, irra_estimate, realized_variance
from .errors import DataError, ForecastError, InsufficientDataError, StudyAbort, TemporalLeakError
from .evaluation import ForecastRecord, ScoreSummary, ifs, pit_series, recalibrate, summarize
from .market_data import (
    CrossSection,
    apply_include_list,
    atm_implied_vol,
    parse_include_list,
    parse_option_chain,
    parse_series,
    parse_settlements,
    prepare_section,
    series_until,
    trailing_volume,
)
from .sentiment import (
    DEAD_ZONE,
    SKEW_THRESHOLD,
    ProxyReading,
    SentimentCalibration,
    SentimentState,
    SentimentTracker,
    real_world_density,
    sentiment_state,
)

log = logging.getLogger(__name__)

HORIZON_DAYS = 28
MAX_FAILED_SHARE = 0.2
VOLUME_DAYS = 20
SCORE_COLUMNS = ("model", "L", "crps", "p_lr3", "p_jb", "p_ks", "Lbar", "crpsbar", "statbar", "ifs")


@dataclass
class TimeGuard:
    """Records every dated read made on behalf of a forecast date and rejects reads from its future."""

    strict: bool = True
    checks: int = 0
    violations: list = field(default_factory=list)

    def check(self, as_of: date, data_date: date, what: str) -> None:
        self.checks += 1
        if data_date > as_of:
            self.violations.append((as_of, data_date, what))
            if self.strict:
                raise TemporalLeakError(f"forecast for {as_of} read {what} dated {data_date}")


@dataclass(frozen=True, eq=False)
class DateFit:
    """Risk-neutral stage of one date: filtered section, grid and per-model densities."""

    section: CrossSection
    atm_iv: float
    bkm: BkmMoments | None
    returns: np.ndarray
    densities: dict[str, DensityGrid]
    params: dict[str, dict]
    sre: dict[str, float]
    fallback: dict[str, bool]


@dataclass
class StudyResult:
    summaries: list[ScoreSummary]
    records: dict[str, list[ForecastRecord]]
    dates: list[date]
    failed: list[tuple[date, str]]
    guard: TimeGuard
    output: Path | None = None


def study_grid(cfg: StudyConfig, atm_iv: float, tau: float) -> np.ndarray:
    return cfg.grid.returns(atm_iv * math.sqrt(tau))


def model_density(kind: str, section: CrossSection, atm_iv: float, returns: np.ndarray, cfg: StudyConfig,
                  seed: int, warm: ModelParams | None = None) -> tuple[DensityGrid, dict, float, ModelParams | None]:
    """One model's risk-neutral density with its fitted parameters and pricing error."""
    tau, F = section.tau, section.forward
    if kind == "LN":
        m = Lognormal(atm_iv)
        return density_from_model(m, tau, F, returns), params_to_dict(m), math.nan, m
    if kind == "BLMALZ":
        diag: dict = {}
        g = blmalz_density(build_vol_surface(section), section, cfg.blmalz_delta, returns, diagnostics=diag)
        return g, {"clamped_mass": diag.get("clamped_mass", 0.0)}, math.nan, None
    res = calibrate(kind, section, replace(cfg.calibration, seed=seed), warm if cfg.warm_start else None)
    return density_from_model(res.params, tau, F, returns), params_to_dict(res.params), res.sre, res.params


def _date_seed(cfg: StudyConfig, when: date, kind: str) -> int:
    ss = np.random.SeedSequence([cfg.seed, cfg.calibration.seed, when.toordinal(), sum(map(ord, kind))])
    return int(ss.generate_state(1)[0])


def fit_date(raw: CrossSection, cfg: StudyConfig, warm: dict[str, ModelParams] | None = None
             ) -> tuple[DateFit, dict[str, ModelParams]]:
    """Filter, price and build every model's risk-neutral density for one date.

    A model that fails falls back to the lognormal at ATM volatility.
    """
    section = prepare_section(raw)
    atm_iv = atm_implied_vol(section)
    try:
        bkm = bkm_moments(section)
    except ForecastError as exc:
        log.warning("%s: model-free moments unavailable (%s)", section.obs_date, exc)
        bkm = None
    returns = study_grid(cfg, atm_iv, section.tau)
    dens, params, sre, fallback, fitted = {}, {}, {}, {}, {}
    for kind in cfg.models:
        try:
            g, p, e, m = model_density(kind, section, atm_iv, returns, cfg,
                                       _date_seed(cfg, section.obs_date, kind), (warm or {}).get(kind))
            fallback[kind] = False
            if m is not None:
                fitted[kind] = m
        except (ForecastError, ArithmeticError, ValueError) as exc:
            log.warning("%s: %s failed (%s); lognormal fallback", section.obs_date, kind, exc)
            ln = Lognormal(atm_iv)
            g, p, e = density_from_model(ln, section.tau, section.forward, returns), params_to_dict(ln), math.nan
            fallback[kind] = True
        dens[kind], params[kind], sre[kind] = g, p, e
    return DateFit(section, atm_iv, bkm, returns, dens, params, sre, fallback), fitted


def _fit_job(args):
    raw, cfg = args
    try:
        return fit_date(raw, cfg)[0]
    except ForecastError as exc:
        return exc


def load_inputs(cfg: StudyConfig):
    if cfg.data.options is None or cfg.data.settlements is None:
        raise DataError("study needs data.options and data.settlements")
    raw = parse_option_chain(cfg.data.options)
    if cfg.data.include is not None:
        raw = apply_include_list(raw, parse_include_list(cfg.data.include))
    dropped = [s for s in raw if (s.expiry_date - s.obs_date).days != HORIZON_DAYS]
    if dropped:
        log.info("ignoring %d cross-section(s) off the %d-day cadence", len(dropped), HORIZON_DAYS)
    raw = [s for s in raw if (s.expiry_date - s.obs_date).days == HORIZON_DAYS]
    if not raw:
        raise InsufficientDataError(f"no cross-section observed {HORIZON_DAYS} days before expiry")
    settle = parse_settlements(cfg.data.settlements)
    volumes = parse_series(cfg.data.volumes, "volume") if cfg.data.volumes else []
    prices = parse_series(cfg.data.prices, "close") if cfg.data.prices else []
    return raw, settle, volumes, prices


def _dated_read(guard: TimeGuard, series, when: date, what: str):
    past = series_until(series, when)
    if past:
        guard.check(when, past[-1][0], what)
    return past


def gamma_for(risk: str, fit: DateFit, closes, cfg: StudyConfig) -> float:
    if risk in CRRA_GAMMAS:
        return CRRA_GAMMAS[risk]
    if fit.bkm is None:
        raise InsufficientDataError("IRRA needs model-free moments")
    phys = realized_variance([c for _, c in closes], fit.section.tau, cfg.irra_window)
    return irra_estimate(fit.bkm, phys, cfg.irra_bounds)


def run_study(cfg: StudyConfig, write: bool = True, guard: TimeGuard | None = None) -> StudyResult:
    """Fit, adjust, correct and score every variant, strictly in date order."""
    raw_sections, settle, volumes, prices = load_inputs(cfg)
    guard = guard or TimeGuard()
    sset = cfg.sentiment
    tracker = SentimentTracker(burn_in=sset.burn_in, august_adjust=sset.august_adjust, guard=guard)
    cals = {p: SentimentCalibration.for_profile(p) for p in cfg.profiles if p != "none"}
    variants = cfg.variants()
    records: dict[str, list[ForecastRecord]] = {v: [] for v in variants}
    past_pits: dict[str, list[tuple[date, float]]] = {}
    failed: list[tuple[date, str]] = []
    scored: list[date] = []
    date_rows, cal_rows, npz = [], [], {}

    fits: list[DateFit | Exception]
    if cfg.workers > 1 and not cfg.warm_start:
        with ProcessPoolExecutor(cfg.workers) as pool:
            fits = list(pool.map(_fit_job, [(s, cfg) for s in raw_sections]))
    else:
        fits, warm = [], {}
        for s in raw_sections:
            try:
                fit, fitted = fit_date(s, cfg, warm)
                warm.update(fitted)
                fits.append(fit)
            except ForecastError as exc:
                fits.append(exc)

    for raw, fit in zip(raw_sections, fits):
        when = raw.obs_date
        if isinstance(fit, Exception):
            log.warning("%s: date skipped (%s)", when, fit)
            failed.append((when, f"{type(fit).__name__}: {fit}"))
            continue
        sec = fit.section
        vol = trailing_volume(_dated_read(guard, volumes, when, "volume series"), when, VOLUME_DAYS)
        closes = _dated_read(guard, prices, when, "price series")
        reading = tracker.observe(when, fit.atm_iv, vol, fit.bkm.skew if fit.bkm else None, sec.rate, sec.tau)
        states = {p: sentiment_state(reading, c, sset.theta3_sign) for p, c in cals.items()}
        fires = _fires(reading)
        try:
            gammas = {r: gamma_for(r, fit, closes, cfg) for r in cfg.risks}
        except ForecastError as exc:
            log.warning("%s: date skipped (%s)", when, exc)
            failed.append((when, f"{type(exc).__name__}: {exc}"))
            continue
        settlement = settle.get(sec.expiry_date)
        if settlement is None:
            log.warning("%s: no settlement for expiry %s; forecast not scored", when, sec.expiry_date)
        realization = None if settlement is None else settlement / sec.forward
        for kind in cfg.models:
            cal_rows.append([when.isoformat(), kind, json.dumps(fit.params[kind], sort_keys=True),
                             repr(fit.sre[kind]), int(fit.fallback[kind])])
            for risk in cfg.risks:
                ra = crra_adjust(fit.densities[kind], gammas[risk])
                out = {}
                for p in cfg.profiles:
                    out[p] = ra if p == "none" else real_world_density(ra, states[p], sset.alpha_tail)
                if cfg.recalibration:
                    base = f"{kind}-{risk}-none"
                    hist = past_pits.get(base, [])
                    usable = [z for exp, z in hist if exp <= when]
                    if usable:
                        guard.check(when, max(exp for exp, _ in hist if exp <= when), f"{base} T-PITs")
                    out["recal"] = recalibrate(ra, usable) if fires else ra
                if realization is None:
                    continue
                for p, g in out.items():
                    records[f"{kind}-{risk}-{p}"].append(ForecastRecord(when, f"{kind}-{risk}-{p}", g, realization))
                if cfg.recalibration:
                    _, t = pit_series([ForecastRecord(when, base, ra, realization)])
                    past_pits.setdefault(base, []).append((sec.expiry_date, float(t[0])))
        if realization is not None:
            scored.append(when)
        date_rows.append(_date_row(when, sec, fit, settlement, reading, states, gammas, fires))
        npz[when.isoformat()] = fit

    n = len(raw_sections)
    if len(failed) > MAX_FAILED_SHARE * n:
        raise StudyAbort(f"{len(failed)} of {n} dates failed (limit {MAX_FAILED_SHARE:.0%})")
    summaries = ifs([summarize(v, records[v]) for v in variants], cfg.normalization)
    result = StudyResult(summaries, records, scored, failed, guard)
    if write:
        result.output = write_outputs(cfg, result, date_rows, cal_rows, npz, tracker)
    return result


def _fires(reading: ProxyReading) -> bool:
    lo, hi = DEAD_ZONE
    return (not lo <= reading.alpha_iv <= hi or not lo <= reading.alpha_tv <= hi
            or (math.isfinite(reading.skew) and abs(reading.skew) > SKEW_THRESHOLD))


DATE_COLUMNS = ("date", "expiry", "forward", "rate", "tau", "settlement", "atm_iv", "skew", "alpha_iv", "alpha_tv",
                "fires")


def _date_row(when, sec, fit, settlement, reading, states, gammas, fires) -> dict:
    row = {
        "date": when.isoformat(), "expiry": sec.expiry_date.isoformat(), "forward": repr(sec.forward),
        "rate": repr(sec.rate), "tau": repr(sec.tau), "settlement": "" if settlement is None else repr(settlement),
        "atm_iv": repr(fit.atm_iv), "skew": repr(reading.skew), "alpha_iv": repr(reading.alpha_iv),
        "alpha_tv": repr(reading.alpha_tv), "fires": int(fires),
    }
    for r, g in gammas.items():
        row[f"gamma_{r}"] = repr(g)
    for p, s in states.items():
        row.update({f"theta1_{p}": repr(s.theta1), f"theta2_{p}": repr(s.theta2), f"theta3_{p}": repr(s.theta3)})
    return row


def write_scores(path, summaries: list[ScoreSummary]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCORE_COLUMNS)
        for s in summaries:
            w.writerow([s.model] + [repr(float(v)) for v in (s.total_log_score, s.crps_mean, s.p_lr3, s.p_jb, s.p_ks,
                                                              s.l_bar, s.crps_bar, s.stat_bar, s.ifs)])


def read_scores(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (v if k == "model" else float(v)) for k, v in r.items()} for r in rows]


def write_outputs(cfg: StudyConfig, result: StudyResult, date_rows, cal_rows, fits, tracker) -> Path:
    out = Path(cfg.output)
    (out / "densities").mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.csv", result.summaries)
    for s in result.summaries:
        recs = result.records[s.model]
        with (out / f"pit_{s.model}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("date", "pit", "t_pit", "log_score", "crps"))
            for r, p, t, ls, c in zip(recs, s.pits, s.t_pits, s.log_scores, s.crps_values):
                w.writerow([r.obs_date.isoformat(), repr(float(p)), repr(float(t)), repr(float(ls)), repr(float(c))])
    cols = list(DATE_COLUMNS) + sorted({k for row in date_rows for k in row} - set(DATE_COLUMNS))
    with (out / "dates.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(date_rows)
    with (out / "calibration.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date", "model", "params", "sre", "fallback"))
        w.writerows(cal_rows)
    with (out / "failures.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date", "error"))
        w.writerows([d.isoformat(), e] for d, e in result.failed)
    tracker.write_csv(out / "proxies.csv")
    for key, fit in fits.items():
        np.savez_compressed(out / "densities" / f"{key}.npz", returns=fit.returns,
                            **{m: g.pdf for m, g in fit.densities.items()})
    meta = {"models": list(cfg.models), "risks": list(cfg.risks), "profiles": list(cfg.profiles),
            "alpha_tail": cfg.sentiment.alpha_tail, "theta3_sign": cfg.sentiment.theta3_sign,
            "recalibration": cfg.recalibration, "seed": cfg.seed}
    (out / "study.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def sentiment_state_from_row(row: dict, profile: str) -> SentimentState:
    """Rebuild a stored date's sentiment state for ``profile``."""
    if profile == "none":
        return SentimentState()
    a_iv, a_tv, sk = float(row["alpha_iv"]), float(row["alpha_tv"]), float(row["skew"])
    lo, hi = DEAD_ZONE
    flags = (not lo <= a_iv <= hi, not lo <= a_tv <= hi, math.isfinite(sk) and abs(sk) > SKEW_THRESHOLD)
    return SentimentState(float(row[f"theta1_{profile}"]), float(row[f"theta2_{profile}"]),
                          float(row[f"theta3_{profile}"]), a_iv, a_tv, sk, flags)
