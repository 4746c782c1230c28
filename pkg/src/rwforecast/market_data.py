"""Option-chain ingestion: parsing, OTM selection, parity conversion and no-arbitrage filtering."""
from __future__ import annotations

import bisect
import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .char_models import implied_vol
from .errors import EmptyInputError, InsufficientDataError, NumericalError, ParseError

log = logging.getLogger(__name__)

MIN_QUOTES = 8
CONVEXITY_TOL = 1e-12
CHAIN_COLUMNS = ("obs_date", "expiry_date", "forward", "rate", "strike", "side", "bid", "ask")
SETTLEMENT_COLUMNS = ("expiry_date", "settlement")
# F/K breakpoints for the moneyness table
MONEYNESS_BUCKETS = (
    ("deep_otm_put", 1.10, math.inf),
    ("otm_put", 1.03, 1.10),
    ("near_the_money", 0.97, 1.03),
    ("otm_call", 0.90, 0.97),
    ("deep_otm_call", 0.0, 0.90),
)


@dataclass(frozen=True)
class OptionQuote:
    strike: float
    bid: float
    ask: float
    side: str = "C"

    def __post_init__(self):
        if not self.strike > 0:
            raise ValueError(f"strike must be positive, got {self.strike}")
        if not self.bid > 0:
            raise ValueError(f"bid must be positive, got {self.bid}")
        if self.ask < self.bid:
            raise ValueError(f"ask {self.ask} below bid {self.bid}")
        if self.side not in ("C", "P"):
            raise ValueError(f"side must be C or P, got {self.side!r}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def spread(self) -> float:
        return self.ask - self.bid


@dataclass(frozen=True)
class CrossSection:
    obs_date: date
    expiry_date: date
    forward: float
    rate: float
    quotes: tuple[OptionQuote, ...]

    def __post_init__(self):
        if not self.forward > 0:
            raise ValueError("forward must be positive")
        if not self.tau > 0:
            raise ValueError(f"expiry {self.expiry_date} is not after {self.obs_date}")

    @property
    def tau(self) -> float:
        """Year fraction, act/360."""
        return (self.expiry_date - self.obs_date).days / 360.0

    @property
    def strikes(self) -> np.ndarray:
        return np.array([q.strike for q in self.quotes])

    @property
    def mids(self) -> np.ndarray:
        return np.array([q.mid for q in self.quotes])

    def with_quotes(self, quotes: Iterable[OptionQuote]) -> "CrossSection":
        return replace(self, quotes=tuple(quotes))


@dataclass(frozen=True)
class SettlementObservation:
    expiry_date: date
    settlement: float
    gross_return: float

    def __post_init__(self):
        if not self.settlement > 0:
            raise ValueError("settlement must be positive")


def _read_rows(path, columns: Sequence[str]):
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyInputError(f"{path} is empty")
        missing = [c for c in columns if c not in reader.fieldnames]
        if missing:
            raise ParseError(f"{path}: missing columns {missing}", line=1)
        rows = [(reader.line_num, row) for row in reader]
    if not rows:
        raise EmptyInputError(f"{path} has no data rows")
    return rows


def _num(row, key, line, allow_blank=False):
    raw = (row.get(key) or "").strip()
    if raw == "":
        if allow_blank:
            return None
        raise ParseError(f"missing {key}", line=line)
    try:
        return float(raw)
    except ValueError:
        raise ParseError(f"bad number {raw!r} in {key}", line=line) from None


def _date(row, key, line) -> date:
    raw = (row.get(key) or "").strip()
    try:
        return date.fromisoformat(raw)
    except ValueError:
        raise ParseError(f"bad ISO date {raw!r} in {key}", line=line) from None


def parse_option_chain(path) -> list[CrossSection]:
    """One raw cross-section per (obs_date, expiry) with quotes sorted by strike.

    Rows without a usable bid or ask are dropped; puts are kept as puts.
    """
    groups: dict[tuple[date, date], list] = defaultdict(list)
    meta: dict[tuple[date, date], tuple[float, float]] = {}
    for line, row in _read_rows(path, CHAIN_COLUMNS):
        obs, exp = _date(row, "obs_date", line), _date(row, "expiry_date", line)
        fwd, rate = _num(row, "forward", line), _num(row, "rate", line)
        strike = _num(row, "strike", line)
        side = (row.get("side") or "").strip().upper()
        if side not in ("C", "P"):
            raise ParseError(f"side must be C or P, got {side!r}", line=line)
        if not (fwd > 0 and strike > 0):
            raise ParseError("forward and strike must be positive", line=line)
        if exp <= obs:
            raise ParseError("expiry_date must follow obs_date", line=line)
        bid = _num(row, "bid", line, allow_blank=True)
        ask = _num(row, "ask", line, allow_blank=True)
        key = (obs, exp)
        if key in meta and not np.allclose(meta[key], (fwd, rate), rtol=1e-12, atol=0):
            raise ParseError(f"inconsistent forward/rate for {obs}/{exp}", line=line)
        meta[key] = (fwd, rate)
        if bid is None or ask is None or bid <= 0 or ask < bid:
            continue
        groups[key].append(OptionQuote(strike, bid, ask, side))
    out = []
    for key in sorted(meta):
        fwd, rate = meta[key]
        quotes = sorted(groups.get(key, []), key=lambda q: (q.strike, q.side))
        out.append(CrossSection(key[0], key[1], fwd, rate, tuple(quotes)))
    return out


def parse_settlements(path) -> dict[date, float]:
    out = {}
    for line, row in _read_rows(path, SETTLEMENT_COLUMNS):
        value = _num(row, "settlement", line)
        if not value > 0:
            raise ParseError("settlement must be positive", line=line)
        out[_date(row, "expiry_date", line)] = value
    return out


def parse_series(path, column: str) -> list[tuple[date, float]]:
    """Dated scalar series such as ``date,volume`` or ``date,close``."""
    out = [(_date(row, "date", line), _num(row, column, line)) for line, row in _read_rows(path, ("date", column))]
    out.sort()
    return out


def settlement_observation(section: CrossSection, settlement: float) -> SettlementObservation:
    return SettlementObservation(section.expiry_date, settlement, settlement / section.forward)


def put_call_parity_convert(quote: OptionQuote, forward: float, rate: float, tau: float) -> float:
    """Call-equivalent mid of a put on a futures contract: ``P + exp(-r tau) (F - K)``."""
    if quote.side != "P":
        raise ValueError("parity conversion expects a put")
    return quote.mid + math.exp(-rate * tau) * (forward - quote.strike)


def to_call_equivalents(section: CrossSection) -> CrossSection:
    """Keep OTM/ATM options (puts K <= F, calls K >= F) and express all as calls.

    A call and a put at the same strike collapse to the call.
    """
    F, disc = section.forward, math.exp(-section.rate * section.tau)
    by_strike: dict[float, OptionQuote] = {}
    for q in section.quotes:
        if q.side == "C" and q.strike >= F:
            by_strike[q.strike] = q
        elif q.side == "P" and q.strike <= F:
            shift = disc * (F - q.strike)
            if put_call_parity_convert(q, F, section.rate, section.tau) <= 0 or q.bid + shift <= 0:
                log.debug("dropping put %s: non-positive call equivalent", q.strike)
                continue
            if q.strike not in by_strike:
                by_strike[q.strike] = OptionQuote(q.strike, q.bid + shift, q.ask + shift, "C")
    return section.with_quotes(by_strike[k] for k in sorted(by_strike))


def _violations(K: np.ndarray, m: np.ndarray) -> tuple[int, np.ndarray]:
    """Total violations and per-quote attribution (decrease pairs count both ends, convexity the centre)."""
    per = np.zeros(len(K), dtype=int)
    if len(K) < 2:
        return 0, per
    bad_dec = np.diff(m) >= 0
    per[:-1] += bad_dec
    per[1:] += bad_dec
    total = int(bad_dec.sum())
    if len(K) >= 3:
        slopes = np.diff(m) / np.diff(K)
        bad_cvx = np.diff(slopes) < -CONVEXITY_TOL * np.maximum(1.0, np.abs(slopes[:-1]))
        per[1:-1] += bad_cvx
        total += int(bad_cvx.sum())
    return total, per


def is_arbitrage_free(section: CrossSection) -> bool:
    return _violations(section.strikes, section.mids)[0] == 0


def arbitrage_filter(section: CrossSection, min_quotes: int = MIN_QUOTES) -> CrossSection:
    """Greedy removal until mids are strictly decreasing and convex in strike.

    Each step drops the quote whose removal resolves the most violations;
    ties go to the wider bid-ask spread, then to the quote directly involved
    in more violations.
    """
    quotes = list(section.quotes)
    while True:
        K = np.array([q.strike for q in quotes])
        m = np.array([q.mid for q in quotes])
        total, per = _violations(K, m)
        if total == 0:
            break
        best_key, best = None, None
        for i in range(len(quotes)):
            keep = np.arange(len(quotes)) != i
            left, _ = _violations(K[keep], m[keep])
            key = (total - left, quotes[i].spread, per[i], -i)
            if best_key is None or key > best_key:
                best_key, best = key, i
        log.debug("arbitrage filter drops strike %s", quotes[best].strike)
        del quotes[best]
    if len(quotes) < min_quotes:
        raise InsufficientDataError(
            f"{section.obs_date}: {len(quotes)} quotes survive filtering, {min_quotes} required"
        )
    return section.with_quotes(quotes)


def prepare_section(raw: CrossSection, min_quotes: int = MIN_QUOTES) -> CrossSection:
    """Raw chain -> canonical call-equivalent, arbitrage-free cross-section."""
    return arbitrage_filter(to_call_equivalents(raw), min_quotes)


def atm_implied_vol(section: CrossSection) -> float:
    """ATM volatility by linear interpolation (in strike) of the two nearest-the-money IVs."""
    if len(section.quotes) < 2:
        raise InsufficientDataError("ATM volatility needs two quotes")
    K = section.strikes
    order = np.argsort(np.abs(K - section.forward), kind="stable")[:2]
    ivs = []
    for j in order:
        q = section.quotes[j]
        try:
            ivs.append(implied_vol(q.mid, section.forward, q.strike, section.tau, section.rate))
        except NumericalError as exc:
            raise NumericalError(f"ATM IV failed for quote at strike {q.strike}: {exc}", where=q.strike) from exc
    k0, k1 = K[order[0]], K[order[1]]
    if k0 == section.forward:
        return ivs[0]
    return float(ivs[0] + (ivs[1] - ivs[0]) * (section.forward - k0) / (k1 - k0))


def moneyness_bucket(forward: float, strike: float) -> str:
    ratio = forward / strike
    for name, lo, hi in MONEYNESS_BUCKETS:
        if lo <= ratio < hi or (name == "otm_put" and ratio == hi):
            return name
    return "deep_otm_put"


def write_option_chain(path, sections: Iterable[CrossSection]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CHAIN_COLUMNS)
        for s in sections:
            for q in s.quotes:
                w.writerow([s.obs_date.isoformat(), s.expiry_date.isoformat(), repr(s.forward), repr(s.rate),
                            repr(q.strike), q.side, repr(q.bid), repr(q.ask)])


def write_settlements(path, settlements: dict[date, float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SETTLEMENT_COLUMNS)
        for d in sorted(settlements):
            w.writerow([d.isoformat(), repr(settlements[d])])


def write_series(path, column: str, series: Iterable[tuple[date, float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date", column))
        for d, v in series:
            w.writerow([d.isoformat(), repr(float(v))])


INCLUDE_COLUMNS = ("obs_date", "expiry_date", "strike", "side", "price")


def parse_include_list(path) -> dict[tuple[date, date], list[OptionQuote]]:
    """Manually vetted last-traded prices, entered as zero-spread quotes."""
    out: dict[tuple[date, date], list[OptionQuote]] = defaultdict(list)
    for line, row in _read_rows(path, INCLUDE_COLUMNS):
        side = (row.get("side") or "").strip().upper()
        price = _num(row, "price", line)
        strike = _num(row, "strike", line)
        if side not in ("C", "P") or not (price > 0 and strike > 0):
            raise ParseError("include-list rows need side C/P and positive strike and price", line=line)
        out[(_date(row, "obs_date", line), _date(row, "expiry_date", line))].append(
            OptionQuote(strike, price, price, side))
    return dict(out)


def apply_include_list(sections: Sequence[CrossSection], extra: dict) -> list[CrossSection]:
    """Add include-list quotes at strikes/sides the raw chain lacks."""
    out = []
    for s in sections:
        add = extra.get((s.obs_date, s.expiry_date), [])
        have = {(q.strike, q.side) for q in s.quotes}
        new = [q for q in add if (q.strike, q.side) not in have]
        if new:
            log.info("%s: %d include-list quote(s) added", s.obs_date, len(new))
            s = s.with_quotes(sorted(s.quotes + tuple(new), key=lambda q: (q.strike, q.side)))
        out.append(s)
    return out


def series_until(series: Sequence[tuple[date, float]], when: date) -> list[tuple[date, float]]:
    """Observations dated on or before ``when`` (series sorted by date)."""
    return list(series[: bisect.bisect_right(series, when, key=lambda item: item[0])])


def trailing_volume(series: Sequence[tuple[date, float]], when: date, days: int = 20) -> float | None:
    """Sum of the last ``days`` daily volumes up to ``when``; None if fewer are available."""
    past = series_until(series, when)
    if len(past) < days:
        return None
    return float(sum(v for _, v in past[-days:]))
