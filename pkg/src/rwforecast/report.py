"""Plot data and rendered figures from a finished study directory."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .density import DensityGrid, crra_adjust, crra_kernel, normalize
from .errors import DataError
from .sentiment import real_world_density, sentiment_function
from .study import read_scores, sentiment_state_from_row

PLOT_DIR = "plot_data"
DENSITY_COLUMNS = ("return", "price", "f_q", "f_ra", "f_rw", "m_crra", "psi", "m_rw")


@dataclass(frozen=True)
class StudyOutput:
    root: Path
    meta: dict
    dates: list[dict]

    @classmethod
    def load(cls, root) -> "StudyOutput":
        root = Path(root)
        try:
            meta = json.loads((root / "study.json").read_text())
            with (root / "dates.csv").open(newline="") as fh:
                rows = list(csv.DictReader(fh))
        except FileNotFoundError as exc:
            raise DataError(f"{root} is not a completed study directory ({exc.filename} missing)") from None
        return cls(root, meta, rows)

    def row(self, when: str) -> dict:
        for r in self.dates:
            if r["date"] == when:
                return r
        raise DataError(f"date {when} not in study output")


def _default_variant(meta: dict) -> tuple[str, str, str]:
    model = meta["models"][0]
    risk = "CRRA2" if "CRRA2" in meta["risks"] else meta["risks"][0]
    active = [p for p in meta["profiles"] if p != "none"]
    return model, risk, active[-1] if active else "none"


def _default_dates(out: StudyOutput) -> list[str]:
    picks = []
    for flag in ("1", "0"):
        hit = next((r["date"] for r in out.dates if r["fires"] == flag), None)
        if hit:
            picks.append(hit)
    return picks


def density_panel(out: StudyOutput, when: str, model: str, risk: str, profile: str) -> dict[str, np.ndarray]:
    """Risk-neutral, risk-adjusted and real-world densities with their kernels for one stored date."""
    row = out.row(when)
    with np.load(out.root / "densities" / f"{when}.npz") as z:
        x = z["returns"]
        f_q_pdf = z[model]
    F, tau, rate = float(row["forward"]), float(row["tau"]), float(row["rate"])
    gamma = float(row[f"gamma_{risk}"])
    f_q = normalize(DensityGrid.from_pdf(x, f_q_pdf, F, tau))
    f_ra = crra_adjust(f_q, gamma)
    state = sentiment_state_from_row(row, profile)
    f_rw = real_world_density(f_ra, state, out.meta.get("alpha_tail", 0.05))
    if state.is_neutral:
        psi = np.ones_like(x)
    else:
        psi = sentiment_function(f_ra, f_rw).psi
    m = crra_kernel(x, gamma, rate, tau)
    return {"return": x, "price": F * x, "f_q": f_q.pdf, "f_ra": f_ra.pdf, "f_rw": f_rw.pdf,
            "m_crra": m, "psi": psi, "m_rw": m * psi}


def emit_plot_data(study_dir, dates=None, model=None, risk=None, profile=None) -> list[Path]:
    """Density panels for selected dates, the theta time series and the IFS bar table."""
    out = StudyOutput.load(study_dir)
    dm, dr, dp = _default_variant(out.meta)
    model, risk, profile = model or dm, risk or dr, profile or dp
    if model not in out.meta["models"] or risk not in out.meta["risks"] or profile not in out.meta["profiles"]:
        raise DataError(f"variant {model}-{risk}-{profile} not in the study")
    target = out.root / PLOT_DIR
    target.mkdir(exist_ok=True)
    written = []
    for when in list(dates or []) or _default_dates(out):
        cols = density_panel(out, when, model, risk, profile)
        path = target / f"density_{when}_{model}-{risk}-{profile}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DENSITY_COLUMNS)
            w.writerows(zip(*(map(repr, map(float, cols[c])) for c in DENSITY_COLUMNS)))
        written.append(path)

    profiles = [p for p in out.meta["profiles"] if p != "none"]
    path = target / "thetas.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        head = ["date", "alpha_iv", "alpha_tv", "skew", "fires"]
        head += [f"theta{i}_{p}" for p in profiles for i in (1, 2, 3)]
        w.writerow(head)
        for r in out.dates:
            w.writerow([r[h] for h in head])
    written.append(path)

    path = target / "ifs_bars.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "Lbar", "crpsbar", "statbar", "ifs"))
        for s in read_scores(out.root / "scores.csv"):
            w.writerow([s["model"]] + [repr(s[k]) for k in ("Lbar", "crpsbar", "statbar", "ifs")])
    written.append(path)
    return written


def write_report_table(study_dir) -> Path:
    """Scores in reporting units: L in nats, CRPS in percent, raw p-values."""
    root = Path(study_dir)
    rows = read_scores(root / "scores.csv")
    path = root / "report.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("model", "L_nats", "crps_pct", "p_lr3", "p_jb", "p_ks", "Lbar", "crpsbar", "statbar", "ifs"))
        for s in sorted(rows, key=lambda s: -s["ifs"]):
            w.writerow([s["model"], repr(s["L"]), repr(100.0 * s["crps"])]
                       + [repr(s[k]) for k in ("p_lr3", "p_jb", "p_ks", "Lbar", "crpsbar", "statbar", "ifs")])
    return path


def _read_csv(path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {k: np.array([r[k] for r in rows]) for k in rows[0]} if rows else {}


def render_report(study_dir, dates=None) -> list[Path]:
    """Report table plus PNG figures: density panels, theta activations and IFS bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    root = Path(study_dir)
    data = emit_plot_data(root, dates)
    written = [write_report_table(root)]
    for path in data:
        if not path.name.startswith("density_"):
            continue
        c = {k: v.astype(float) for k, v in _read_csv(path).items()}
        fig, (a, b) = plt.subplots(1, 2, figsize=(11, 4))
        forward = c["price"][0] / c["return"][0]
        for key, label in (("f_q", "risk-neutral"), ("f_ra", "risk-adjusted"), ("f_rw", "real-world")):
            a.plot(c["price"], c[key] / forward, label=label)
        a.set_xlabel("price at expiry")
        a.set_ylabel("density")
        a.legend()
        keep = (c["f_q"] > 1e-6 * c["f_q"].max())
        for key, label in (("m_crra", "CRRA kernel"), ("psi", "sentiment"), ("m_rw", "real-world kernel")):
            b.plot(c["price"][keep], c[key][keep], label=label)
        b.set_xlabel("price at expiry")
        b.legend()
        fig.suptitle(path.stem.removeprefix("density_"))
        fig.tight_layout()
        png = root / f"fig_{path.stem}.png"
        fig.savefig(png, dpi=110)
        plt.close(fig)
        written.append(png)

    th = _read_csv(root / PLOT_DIR / "thetas.csv")
    if th:
        cols = [k for k in th if k.startswith("theta")]
        fig, axes = plt.subplots(3, 1, figsize=(10, 7), sharex=True)
        x = np.arange(len(th["date"]))
        for i, ax in enumerate(axes, start=1):
            for k in (k for k in cols if k.startswith(f"theta{i}_")):
                ax.step(x, th[k].astype(float), where="mid", label=k)
            ax.set_ylabel(f"theta{i}")
            if any(k.startswith(f"theta{i}_") for k in cols):
                ax.legend(loc="upper right")
        ticks = x[:: max(1, len(x) // 8)]
        axes[-1].set_xticks(ticks, th["date"][ticks], rotation=30)
        fig.tight_layout()
        png = root / "fig_thetas.png"
        fig.savefig(png, dpi=110)
        plt.close(fig)
        written.append(png)

    bars = _read_csv(root / PLOT_DIR / "ifs_bars.csv")
    order = np.argsort(-bars["ifs"].astype(float))
    fig, ax = plt.subplots(figsize=(10, max(3.0, 0.28 * len(order) + 1)))
    y = np.arange(len(order))
    left = np.zeros(len(order))
    for key, label in (("Lbar", "log score"), ("crpsbar", "CRPS"), ("statbar", "PIT tests")):
        v = bars[key].astype(float)[order] / 3.0
        ax.barh(y, v, left=left, label=label)
        left += v
    ax.set_yticks(y, bars["model"][order])
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("integrated forecast score")
    ax.legend(loc="lower right")
    fig.tight_layout()
    png = root / "fig_ifs.png"
    fig.savefig(png, dpi=110)
    plt.close(fig)
    written.append(png)
    return written + data

