"""Command-line front end: combine, rescale, fit, simulate, summarize.

Exit codes: 0 success, 1 input/validation error, 2 numerical non-convergence.
stdout carries machine-readable payload only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .csvio import read_csv, write_csv
from .data import WeightScaling, combine_datasets, rescale_weights, summarize
from .errors import PseudoclusterError
from .fitting import fit_three_level, fit_two_level
from .simulation import (DEFAULT_POPULATION_CLUSTERS,
                         DEFAULT_SINGLETON_POOL_FACTOR, MonteCarloConfig,
                         Scenario, TABLES, run_table)


class CliError(Exception):
    """Invalid invocation or input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="pseudocluster",
                     description="Pseudo-clustered survey data and weighted "
                                 "mixed models")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("combine", help="merge datasets into one hierarchy")
    p.add_argument("--inputs", required=True,
                   help="comma-separated list of input CSV files")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("rescale", help="rescale conditional weights")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", required=True, choices=["raw", "cluster-size"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("summarize", help="print level counts and weight ranges")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("fit", help="fit a weighted mixed model")
    p.add_argument("--data", required=True)
    p.add_argument("--levels", required=True, type=int, choices=[2, 3])
    p.add_argument("--outcome", required=True,
                   help="outcome column (the schema names it 'y')")
    p.add_argument("--fixed", default="",
                   help="comma-separated covariate columns (x#/z#/v#)")
    p.add_argument("--weighted", action="store_true")
    p.add_argument("--scaling", default="raw", choices=["raw", "cluster-size"])
    p.add_argument("--out", help="write the JSON document here instead of stdout")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo table")
    p.add_argument("--config", required=True, help="JSON scenario configuration")
    p.add_argument("--reps", type=int, help="override the config's B")
    p.add_argument("--seed", type=int, help="override the config's master_seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_simulate)

    return parser


def cmd_combine(args) -> int:
    paths = [s for s in args.inputs.split(",") if s]
    if not paths:
        raise CliError("--inputs needs at least one file")
    sources = [read_csv(p) for p in paths]
    combined = combine_datasets(sources)
    write_csv(combined, args.out)
    print(f"combine: wrote {combined.n_observations} observations to {args.out}",
          file=sys.stderr)
    return 0


def cmd_rescale(args) -> int:
    data = read_csv(args.data)
    write_csv(rescale_weights(data, WeightScaling(args.mode)), args.out)
    return 0


def cmd_summarize(args) -> int:
    info = summarize(read_csv(args.data)).as_dict()
    print(",".join(info))
    print(",".join(repr(v) if isinstance(v, float) else str(v)
                   for v in info.values()))
    return 0


def cmd_fit(args) -> int:
    if args.outcome != "y":
        raise CliError("the CSV schema names the outcome column 'y'; "
                       f"got --outcome {args.outcome!r}")
    data = read_csv(args.data)
    fixed = tuple(s for s in args.fixed.split(",") if s)
    if args.levels == 3:
        fit = fit_three_level(data, fixed, weighted=args.weighted,
                              scaling=args.scaling)
    else:
        fit = fit_two_level(data, fixed, weighted=args.weighted,
                            scaling=args.scaling)
    doc = fit.to_json(indent=2)
    if args.out:
        Path(args.out).write_text(doc + "\n", encoding="utf-8")
    else:
        print(doc)
    if not fit.convergence.converged:
        print("fit: did not converge; see the convergence block",
              file=sys.stderr)
        return 2
    return 0


def _config_error(pointer: str, message: str):
    raise CliError(f"config {pointer}: {message}")


def parse_simulation_config(doc: dict) -> tuple[MonteCarloConfig, str, dict]:
    """Validate the simulate config document; errors carry JSON-pointer paths."""
    if not isinstance(doc, dict):
        _config_error("", "must be a JSON object")
    table = doc.get("table")
    if table not in TABLES:
        _config_error("/table", f"must be one of {list(TABLES)}, got {table!r}")
    B = doc.get("B")
    if not isinstance(B, int) or isinstance(B, bool) or B < 1:
        _config_error("/B", f"must be an integer >= 1, got {B!r}")
    seed = doc.get("master_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _config_error("/master_seed", f"must be a non-negative integer, got {seed!r}")
    raw_scenarios = doc.get("scenarios")
    if not isinstance(raw_scenarios, list) or not raw_scenarios:
        _config_error("/scenarios", "must be a non-empty array")
    scenarios = []
    for i, sc in enumerate(raw_scenarios):
        if not isinstance(sc, dict):
            _config_error(f"/scenarios/{i}", "must be an object")
        for key in ("m", "n"):
            v = sc.get(key)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                _config_error(f"/scenarios/{i}/{key}",
                              f"must be an integer >= 1, got {v!r}")
        pct = sc.get("singleton_pct", 0)
        if not isinstance(pct, (int, float)) or isinstance(pct, bool) \
                or not 0 <= pct < 100:
            _config_error(f"/scenarios/{i}/singleton_pct",
                          f"must be a number in [0, 100), got {pct!r}")
        unknown = set(sc) - {"m", "n", "singleton_pct"}
        if unknown:
            _config_error(f"/scenarios/{i}", f"unknown field(s) {sorted(unknown)}")
        scenarios.append(Scenario(m=sc["m"], n=sc["n"], singleton_pct=float(pct)))
    options = {}
    scaling = doc.get("scaling", "cluster-size")
    try:
        options["scaling"] = WeightScaling(scaling)
    except ValueError:
        _config_error("/scaling", f"must be 'raw' or 'cluster-size', got {scaling!r}")
    mpop = doc.get("m_population", DEFAULT_POPULATION_CLUSTERS)
    if not isinstance(mpop, int) or isinstance(mpop, bool) or mpop < 1:
        _config_error("/m_population", f"must be an integer >= 1, got {mpop!r}")
    options["m_population"] = mpop
    pool = doc.get("singleton_pool_factor", DEFAULT_SINGLETON_POOL_FACTOR)
    if not isinstance(pool, int) or isinstance(pool, bool) or pool < 1:
        _config_error("/singleton_pool_factor",
                      f"must be an integer >= 1, got {pool!r}")
    options["singleton_pool_factor"] = pool
    known = {"table", "B", "master_seed", "scenarios", "scaling",
             "m_population", "singleton_pool_factor"}
    unknown = set(doc) - known
    if unknown:
        _config_error("", f"unknown field(s) {sorted(unknown)}")
    cfg = MonteCarloConfig(B=B, scenarios=tuple(scenarios), master_seed=seed)
    return cfg, table, options


def cmd_simulate(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from None
    if args.reps is not None:
        doc["B"] = args.reps
    if args.seed is not None:
        doc["master_seed"] = args.seed
    cfg, table, options = parse_simulation_config(doc)
    if args.threads < 1:
        raise CliError("--threads must be >= 1")

    report = run_table(cfg, table, threads=args.threads, **options)
    out = Path(args.out)
    out.write_text(report.to_csv_text(), encoding="utf-8")
    md = out.with_suffix(".md") if out.suffix else Path(str(out) + ".md")
    md.write_text(report.to_markdown_text(), encoding="utf-8")
    print(f"simulate: {table}, B={cfg.B}, {len(cfg.scenarios)} scenario(s) -> "
          f"{out} and {md}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except PseudoclusterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
