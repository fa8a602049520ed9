"""Command-line front end: ingest, synth, forecast, detect, eval.

Exit codes: 0 ok, 2 bad input, 3 pipeline failure, 4 domain error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .anomaly import CalendarError, HolidayCalendar, records_frame, run_detection, summarize_most_frequent, tabulate
from .config import ConfigError, RunConfig, load_config
from .evaluate import STAGES, plan_blocked_cv, run_pipeline
from .hierarchy import StructureError, StructureSpec, coherence_residual
from .ingest import (
    TIMESTAMP_FORMAT,
    IngestError,
    aggregate_hourly,
    collection_from_bottom,
    filter_degenerate,
    read_dataset,
    read_raw_csv,
    write_dataset,
)
from .synthetic import demo_structure, generate_synthetic, plan_surges, taiwan_like_structure

log = logging.getLogger("olsrecon")

EXIT_OK, EXIT_INPUT, EXIT_PIPELINE, EXIT_DOMAIN = 0, 2, 3, 4
FORECAST_COLUMNS = ["split", "node", "timestamp", "actual", "forecast", "lo90", "hi90", "lo95", "hi95"]
ANOMALY_COLUMNS = ["node", "timestamp", "observed", "upper", "level", "day_part", "holiday"]


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def header(cfg: RunConfig | None, extra: str = "") -> str:
    parts = [f"olsrecon {__version__}"]
    if cfg is not None:
        parts += [f"config={cfg.digest()}", f"seed={cfg.seed}"]
    if extra:
        parts.append(extra)
    return " ".join(parts)


def write_csv(path: Path, df: pd.DataFrame, head: str, float_format: str = "%.6f") -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# {head}\n")
        df.to_csv(fh, index=False, float_format=float_format, lineterminator="\n")
    return path


def read_csv(path: str | Path) -> pd.DataFrame:
    """Read a CSV written by this tool (skips the metadata header)."""
    return pd.read_csv(path, comment="#")


def parse_splits(text: str | None) -> list[int] | None:
    if not text:
        return None
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out += range(int(a), int(b) + 1)
        elif part:
            out.append(int(part))
    return sorted(set(out))


def load_structure(path: str | Path) -> StructureSpec:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        return StructureSpec.from_dict(data or {})
    except (OSError, yaml.YAMLError, StructureError, TypeError, AttributeError) as exc:
        raise CliError(f"cannot load structure {path}: {exc}", EXIT_INPUT) from exc


def load_collection(cfg: RunConfig):
    if cfg.data is None:
        raise CliError("no dataset given (--data or 'data' in the config file)", EXIT_INPUT)
    spec = load_structure(cfg.structure) if cfg.structure else None
    try:
        return read_dataset(cfg.data, spec)
    except (IngestError, OSError, StructureError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load dataset {cfg.data}: {exc}", EXIT_INPUT) from exc


# -- commands --------------------------------------------------------------

def cmd_ingest(args) -> int:
    spec = load_structure(args.structure)
    columns = None
    if args.columns:
        columns = yaml.safe_load(Path(args.columns).read_text(encoding="utf-8"))
    frames = [read_raw_csv(p, spec, columns=columns, strict=args.strict) for p in args.raw]
    records = pd.concat(frames, ignore_index=True)
    bottom = aggregate_hourly(records, spec.key_fields, args.start, args.end)
    kept, dropped = filter_degenerate(bottom, args.zero_limit)
    if not kept.keys:
        raise IngestError("every series was dropped by the zero filter")
    collection = collection_from_bottom(kept, spec, {"source": [str(p) for p in args.raw]})
    out = Path(args.output)
    write_dataset(out, collection, dropped, header=header(None, f"source={len(args.raw)}file(s)"))
    (out / "structure.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False), encoding="utf-8")
    print(f"wrote {collection.T} hours x {collection.S.m} bottom series (n={collection.S.n}, dropped {len(dropped)}) to {out}")
    return EXIT_OK


def _synth_calendar(index: pd.DatetimeIndex, count: int, length: int, first_day: int) -> HolidayCalendar:
    days = len(index) // 24
    room = days - first_day
    if count <= 0 or room < length:
        return HolidayCalendar([])
    gap = room // count
    if gap < length:
        raise CliError(f"{count} holidays of {length} days do not fit after day {first_day}", EXIT_INPUT)
    out = []
    for k in range(count):
        start = index[0].normalize() + pd.Timedelta(days=first_day + k * gap)
        end = start + pd.Timedelta(days=length - 1)
        out.append((start.date(), end.date(), f"H{k + 1:02d} {start:%m-%d} to {end:%m-%d}"))
    return HolidayCalendar(out)


def cmd_synth(args) -> int:
    if args.structure:
        spec, keys = load_structure(args.structure), None
    elif args.preset == "taiwan":
        spec, keys = taiwan_like_structure()
    else:
        spec, keys = demo_structure()
    clean, _ = generate_synthetic(spec, args.days, seed=args.seed, bottom_keys=keys)
    first_day = (args.T_train // 24) + 1
    cal = _synth_calendar(clean.index, args.holidays, args.holiday_length, first_day)
    plan = []
    if args.surges_per_day > 0 and len(cal):
        plan = plan_surges(clean.S, clean.index, cal.hours_in(clean.index), args.surges_per_day, args.sigmas, seed=args.seed + 1)
    collection, truth = generate_synthetic(spec, args.days, seed=args.seed, bottom_keys=keys, anomaly_plan=plan)
    out = Path(args.output)
    write_dataset(out, collection, header=header(None, f"synthetic seed={args.seed}"))
    (out / "structure.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False), encoding="utf-8")
    if len(cal):
        cal.to_frame()[["start", "end", "label"]].to_csv(out / "calendar.csv", index=False)
    truth_df = pd.DataFrame(
        [{"node": a.node, "timestamp": a.timestamp.strftime(TIMESTAMP_FORMAT), "amount": a.amount, "sigmas": a.sigmas} for a in truth],
        columns=["node", "timestamp", "amount", "sigmas"],
    )
    write_csv(out / "truth.csv", truth_df, header(None, f"synthetic seed={args.seed}"))
    print(f"wrote {collection.T} hours, n={collection.S.n} nodes, {len(cal)} holidays, {len(truth)} injected surges to {out}")
    return EXIT_OK


def _config_from(args, need: Sequence[str] = ()) -> RunConfig:
    keys = [
        "data", "structure", "calendar", "output", "fourier_daily", "fourier_weekly", "lags", "trend", "T_train",
        "T_test", "K", "levels", "seed", "clamp", "method", "shrinkage", "draws", "error_pool", "detect_level",
        "detect_K", "symmetric", "workers",
    ]
    overrides = {k: getattr(args, k, None) for k in keys}
    cfg = load_config(args.config, overrides)
    return cfg.validate(tuple(need))


def _bounds(intervals, alpha, n, h):
    try:
        return intervals.bounds(alpha)
    except (KeyError, AttributeError):
        return np.full((n, h), np.nan), np.full((n, h), np.nan)


def cmd_forecast(args) -> int:
    cfg = _config_from(args)
    collection = load_collection(cfg)
    out = Path(cfg.output)
    try:
        plan = plan_blocked_cv(collection.T, cfg.T_train, cfg.T_test)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    only = parse_splits(args.splits)
    result = run_pipeline(collection, plan, cfg.pipeline(), intervals=True, workers=cfg.workers, only=only)
    S = collection.S
    labels = np.array(S.node_labels, dtype=object)
    frames, audit = [], []
    for r in result.splits:
        n, h = r.reconciled.shape
        ts = collection.index[r.test[0]:r.test[1]].strftime(TIMESTAMP_FORMAT)
        lo90, hi90 = _bounds(r.intervals, 0.10, n, h)
        lo95, hi95 = _bounds(r.intervals, 0.05, n, h)
        frames.append(
            pd.DataFrame(
                {
                    "split": r.split,
                    "node": np.repeat(labels, h),
                    "timestamp": np.tile(ts, n),
                    "actual": r.actual.ravel(),
                    "forecast": r.reconciled.ravel(),
                    "lo90": lo90.ravel(),
                    "hi90": hi90.ravel(),
                    "lo95": lo95.ravel(),
                    "hi95": hi95.ravel(),
                    "base": r.base.ravel(),
                }
            )
        )
        audit.append(max(coherence_residual(S, r.reconciled[:, j], relative=True) for j in range(h)))
    head = header(cfg)
    fc = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=FORECAST_COLUMNS + ["base"])
    write_csv(out / "forecasts.csv", fc[FORECAST_COLUMNS], head)
    plot_nodes = args.plot_nodes.split(",") if args.plot_nodes else [S.node_labels[0], S.bottom_labels[0]]
    write_csv(out / "plot_data.csv", fc[fc["node"].isin(plot_nodes)], head)
    _write_errors(out, result.errors, [(r.split, k, v) for r in result.splits for k, v in r.failed.items()])
    worst = max(audit) if audit else 0.0
    print(f"{len(result.splits)} split(s) written to {out}; max relative coherence residual {worst:.2e}")
    if result.errors:
        print(f"{len(result.errors)} split(s) failed; see {out / 'errors.log'}", file=sys.stderr)
        return EXIT_PIPELINE
    return EXIT_OK


def _write_errors(out: Path, split_errors: dict, node_errors: list) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "errors.log", "w", encoding="utf-8") as fh:
        for s, msg in sorted(split_errors.items()):
            fh.write(f"split {s}: FAILED: {msg}\n")
        for s, node, msg in node_errors:
            fh.write(f"split {s}: node failed: {msg}\n")


def cmd_detect(args) -> int:
    cfg = _config_from(args, need=("calendar",))
    collection = load_collection(cfg)
    try:
        calendar = HolidayCalendar.from_csv(cfg.calendar)
    except (CalendarError, OSError) as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    S = collection.S
    nodes = None
    if args.detect_levels_of:
        names = [v.strip() for v in args.detect_levels_of.split(",")]
        try:
            nodes = sorted(i for name in names for i in S.index.block(name))
        except KeyError as exc:
            raise CliError(str(exc), EXIT_INPUT) from exc
    try:
        run = run_detection(
            collection, calendar, cfg.pipeline(K=cfg.detect_K), T_train=cfg.T_train,
            symmetric=cfg.symmetric, nodes=nodes, workers=cfg.workers,
        )
    except CalendarError as exc:
        raise CliError(str(exc), EXIT_DOMAIN) from exc
    out = Path(cfg.output)
    head = header(cfg, f"K={cfg.detect_K}")
    rec = records_frame(run.records)
    rec["timestamp"] = pd.to_datetime(rec["timestamp"]).dt.strftime(TIMESTAMP_FORMAT) if len(rec) else rec["timestamp"]
    cols = ANOMALY_COLUMNS + (["side"] if cfg.symmetric else [])
    write_csv(out / "anomalies.csv", rec[cols], head)
    chosen = [r for r in run.records if round(r.level, 10) == round(cfg.detect_level, 10) and r.side == "upper"]
    tables = {}
    for group in ("region", "highway"):
        try:
            tab = tabulate(chosen, run.calendar, S, by=(group, "direction"))
        except KeyError:
            continue
        tables[group] = tab
        write_csv(out / f"table_{group}_direction.csv", tab.data, head)
        wide = tab.wide()
        wide.columns = [f"{d}|{g}|{p}" for d, g, p in wide.columns]
        write_csv(out / f"table_{group}_direction_wide.csv", wide.reset_index(), head, float_format="%.1f")
    if "region" in tables:
        summary = summarize_most_frequent(tables["region"], tables.get("highway"))
        write_csv(out / "summary.csv", summary, head)
    _write_errors(out, run.errors, [(r.split, k, v) for r in run.splits for k, v in r.failed.items()])
    print(
        f"{len(chosen)} anomalies at level {cfg.detect_level} over {run.calendar.total_days} holiday day(s); "
        f"{len(run.skipped_days)} day(s) skipped for lack of history; output in {out}"
    )
    return EXIT_PIPELINE if run.errors else EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    collection = load_collection(cfg)
    try:
        plan = plan_blocked_cv(collection.T, cfg.T_train, cfg.T_test)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_INPUT) from exc
    result = run_pipeline(collection, plan, cfg.pipeline(), intervals=not args.no_intervals, workers=cfg.workers,
                          only=parse_splits(args.splits))
    rep = result.report
    out = Path(cfg.output)
    head = header(cfg)
    write_csv(out / "rmse_summary.csv", rep.summary, head)
    write_csv(out / "rmse_log.csv", rep.log, head, float_format="%.10g")
    per_split = rep.timings.copy()
    write_csv(out / "timing_splits.csv", per_split, head)
    write_csv(out / "timing.csv", rep.timing_summary, head, float_format="%.3f")
    _write_errors(out, result.errors, [(r.split, k, v) for r in result.splits for k, v in r.failed.items()])
    lams = [r.lam for r in result.splits if r.lam is not None]
    report = {
        "version": __version__,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "splits_planned": len(plan),
        "splits_run": len(result.splits),
        "splits_failed": {str(k): v for k, v in result.errors.items()},
        "failed_node_cells": int(len(rep.failures)),
        "se_pooling": rep.pooling,
        "shrinkage_lambda": {"mean": float(np.mean(lams)), "min": float(np.min(lams)), "max": float(np.max(lams))} if lams else None,
        "rmse": rep.summary[["level", "method", "mean_rmse", "se", "cells", "display"]].to_dict(orient="records"),
        "timing_seconds": {s: float(v) for s, v in zip(rep.timing_summary["stage"], rep.timing_summary["seconds"])},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    table = rep.summary.pivot(index="level", columns="method", values="display")
    table = table.reindex([lvl for lvl in dict.fromkeys(rep.summary["level"])])
    print(table.to_string())
    print()
    for s, v in zip(rep.timing_summary["stage"], rep.timing_summary["seconds"]):
        print(f"{s:<26s}{v:10.2f} s")
    return EXIT_PIPELINE if result.errors else EXIT_OK


# -- argument parsing ------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run settings (override the config file)")
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--data", help="dataset directory (hourly.csv + metadata.json)")
    g.add_argument("--structure", help="structure YAML (default: the one stored with the dataset)")
    g.add_argument("--calendar", help="holiday calendar CSV (start,end,label)")
    g.add_argument("--output", help="output directory (env OLSRECON_OUTPUT_DIR also works)")
    g.add_argument("--fourier-daily", dest="fourier_daily", type=int)
    g.add_argument("--fourier-weekly", dest="fourier_weekly", type=int)
    g.add_argument("--lags", help="comma-separated lags, e.g. 1,24")
    g.add_argument("--no-trend", dest="trend", action="store_const", const=False)
    g.add_argument("--T-train", dest="T_train", type=int)
    g.add_argument("--T-test", dest="T_test", type=int)
    g.add_argument("--K", type=int, help="bootstrap sample paths")
    g.add_argument("--levels", help="comma-separated alphas, e.g. 0.10,0.05")
    g.add_argument("--seed", type=int)
    g.add_argument("--clamp", action="store_const", const=True, help="floor interval bounds at zero")
    g.add_argument("--method", choices=("mint-shrink", "wls-diagonal", "ols-identity", "bottom-up"))
    g.add_argument("--shrinkage", type=float, help="fix the shrinkage intensity instead of estimating it")
    g.add_argument("--draws", choices=("joint", "independent"), help="resample residual rows jointly or per node")
    g.add_argument("--error-pool", dest="error_pool", type=int, help="stack errors from this many earlier splits")
    g.add_argument("--workers", type=int, help="processes across splits")
    g.add_argument("--splits", help="subset of split indices, e.g. 0-3,10")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="olsrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw 5-minute CSV records to an hourly dataset")
    p.add_argument("raw", nargs="+", help="raw CSV file(s)")
    p.add_argument("--structure", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--columns", help="YAML mapping canonical column -> file column")
    p.add_argument("--start", help="first date (default: first record)")
    p.add_argument("--end", help="last date, inclusive (default: last record)")
    p.add_argument("--strict", action="store_true", help="fail on any malformed row")
    p.add_argument("--zero-limit", dest="zero_limit", type=float, default=0.8)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write a synthetic dataset with optional holiday surges")
    p.add_argument("--preset", choices=("demo", "taiwan"), default="demo")
    p.add_argument("--structure", help="structure YAML instead of a preset (all key combinations)")
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--holidays", type=int, default=0, help="number of synthetic holidays")
    p.add_argument("--holiday-length", dest="holiday_length", type=int, default=3)
    p.add_argument("--surges-per-day", dest="surges_per_day", type=float, default=0.0)
    p.add_argument("--sigmas", type=float, default=6.0)
    p.add_argument("--T-train", dest="T_train", type=int, default=336)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("forecast", help="reconciled forecasts and intervals for every CV split")
    _add_run_options(p)
    p.add_argument("--plot-nodes", dest="plot_nodes", help="comma-separated node labels for plot_data.csv")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("detect", help="flag holiday hours above the upper interval bound")
    _add_run_options(p)
    p.add_argument("--detect-level", dest="detect_level", type=float, help="alpha used for the tables (default 0.05)")
    p.add_argument("--detect-K", dest="detect_K", type=int, help="sample paths for detection (default 5000)")
    p.add_argument("--symmetric", action="store_const", const=True, help="also flag values below the lower bound")
    p.add_argument("--nodes-of", dest="detect_levels_of", help="comma-separated aggregation levels to search")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="RMSE and timing report over the CV splits")
    _add_run_options(p)
    p.add_argument("--no-intervals", dest="no_intervals", action="store_true", help="skip sample paths")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, IngestError, StructureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalendarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
