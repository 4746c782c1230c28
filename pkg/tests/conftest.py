from __future__ import annotations

import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import settings

from rwforecast.char_models import black76_call, price_european_call
from rwforecast.density import DensityGrid, GridSpec
from rwforecast.market_data import CrossSection, OptionQuote

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")

OBS = date(2020, 1, 6)
TAU_DAYS = 28


def otm_section(strikes, calls, forward=100.0, rate=0.0, obs=OBS, days=TAU_DAYS, half_spread=0.0):
    """Call-equivalent quotes from call values, split into OTM puts and calls as a chain would carry them."""
    tau = days / 360.0
    disc = math.exp(-rate * tau)
    quotes = []
    for k, c in zip(strikes, calls):
        if k >= forward:
            side, v = "C", c
        else:
            side, v = "P", c - disc * (forward - k)
        quotes.append(OptionQuote(float(k), float(v * (1 - half_spread)), float(v * (1 + half_spread)), side))
    return CrossSection(obs, obs + timedelta(days), forward, rate, tuple(quotes))


def call_section(strikes, calls, forward=100.0, rate=0.0, obs=OBS, days=TAU_DAYS):
    quotes = tuple(OptionQuote(float(k), float(c), float(c), "C") for k, c in zip(strikes, calls))
    return CrossSection(obs, obs + timedelta(days), forward, rate, quotes)


def flat_vol_section(sigma=0.2, forward=100.0, rate=0.0, n=25, span=(-4.0, 4.0), days=TAU_DAYS):
    tau = days / 360.0
    s = sigma * math.sqrt(tau)
    K = forward * np.exp(np.linspace(span[0] * s, span[1] * s, n))
    return call_section(K, black76_call(forward, K, tau, rate, sigma), forward, rate, days=days)


def model_section(model, forward=100.0, rate=0.01, n=25, span=(-4.0, 3.0), days=TAU_DAYS, scale_sd=0.06):
    tau = days / 360.0
    K = forward * np.exp(np.linspace(span[0] * scale_sd, span[1] * scale_sd, n))
    return call_section(K, price_european_call(model, K, tau, forward, rate), forward, rate, days=days)


def lognormal_grid(sigma=0.2, tau=TAU_DAYS / 360.0, forward=1.0, spec=GridSpec()):
    s = sigma * math.sqrt(tau)
    x = spec.returns(s)
    pdf = np.exp(-((np.log(x) + 0.5 * s * s) ** 2) / (2 * s * s)) / (x * s * math.sqrt(2 * math.pi))
    return DensityGrid.from_pdf(x, pdf, forward, tau)


@pytest.fixture
def ln_grid():
    return lognormal_grid()


# one summary line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
