"""Command-line entry point: simulate, ingest, run, report, plot-data."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import StudyConfig, load_config
from .errors import ConfigError, DataError, ForecastError, StudyAbort
from .market_data import moneyness_bucket, parse_option_chain, prepare_section, write_option_chain

log = logging.getLogger("rwforecast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 0, 2, 3, 4


def _config(args) -> StudyConfig:
    cfg = load_config(args.config) if args.config else StudyConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output=Path(args.out))
    if getattr(args, "profile", None):
        cfg = cfg.with_profile(args.profile)
    return cfg


def cmd_simulate(args) -> int:
    from .synthetic import SyntheticMarketSpec, simulate_market

    cfg = _config(args)
    spec = SyntheticMarketSpec.from_dict(cfg.simulation)
    if args.profile:
        spec = replace(spec, profile=args.profile)
    market = simulate_market(spec, cfg.seed, cfg.output)
    for name, path in market.paths.items():
        print(f"{name},{path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _config(args)
    if cfg.data.options is None:
        raise ConfigError("ingest needs data.options")
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    kept, counts = [], {}
    with (out / "ingest.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("obs_date", "expiry_date", "raw_quotes", "kept_quotes", "status"))
        for raw in parse_option_chain(cfg.data.options):
            try:
                s = prepare_section(raw)
            except DataError as exc:
                w.writerow([raw.obs_date.isoformat(), raw.expiry_date.isoformat(), len(raw.quotes), 0, str(exc)])
                continue
            kept.append(s)
            for q in s.quotes:
                b = moneyness_bucket(s.forward, q.strike)
                counts[b] = counts.get(b, 0) + 1
            w.writerow([raw.obs_date.isoformat(), raw.expiry_date.isoformat(), len(raw.quotes), len(s.quotes), "ok"])
    write_option_chain(out / "sections.csv", kept)
    with (out / "moneyness.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("bucket", "quotes"))
        w.writerows(sorted(counts.items()))
    print(f"sections,{len(kept)}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .study import run_study

    cfg = _config(args)
    result = run_study(cfg)
    print(f"scores,{Path(result.output) / 'scores.csv'}")
    print(f"dates_scored,{len(result.dates)}")
    print(f"dates_failed,{len(result.failed)}")
    return EXIT_OK


def _study_dir(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(load_config(args.config).output) if args.config else Path("out")


def cmd_report(args) -> int:
    from .report import render_report

    dates = load_config(args.config).plot_dates if args.config else ()
    for path in render_report(_study_dir(args), dates or None):
        print(path)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    from .report import emit_plot_data

    dates = load_config(args.config).plot_dates if args.config else ()
    for path in emit_plot_data(_study_dir(args), dates or None, profile=args.profile):
        print(path)
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "generate a synthetic option market"),
    "ingest": (cmd_ingest, "parse and filter an option chain"),
    "run": (cmd_run, "run the out-of-sample study"),
    "report": (cmd_report, "render figures and the report table from a study directory"),
    "plot-data": (cmd_plot_data, "write plot-ready CSVs from a study directory"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwforecast", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, text) in COMMANDS.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", type=Path)
        s.add_argument("--seed", type=int)
        s.add_argument("--out", type=Path)
        s.add_argument("--profile", choices=("none", "low", "high"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command][0](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StudyAbort as exc:
        print(f"study aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ForecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
