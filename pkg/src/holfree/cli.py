"""Command-line entry point: run experiments, compare reports, export workloads."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .bench import (LOADERS, MODES, ConfigError, compare, format_table, load_config, load_report,
                    run_experiment, write_compare_csv)
from .workloads import SPECS, export_csv, generate, get_spec

LOG_ENV = "HOLFREE_LOG_LEVEL"
log = logging.getLogger("holfree")


def _run(args) -> int:
    cfg = load_config(args.config)
    updates = {k: v for k, v in (("loader", args.loader), ("mode", args.mode), ("seed", args.seed))
               if v is not None}
    if updates:
        cfg = replace(cfg, **updates)
    out = args.out or cfg.out or "results"
    report = run_experiment(cfg, out)
    print(f"{report['loader']} on {report['workload']}: completion {report['completion_ms']} ms, "
          f"idle {report['idle_fraction']}, {report['throughput_mb_s']} MB/s -> {out}/report.json")
    cons = report["conservation"]
    if report["partial"]:
        log.error("run aborted before completion; metrics are partial")
        return 3
    if not (cons["exactly_once"] and cons["batch_sizes_ok"]):
        log.error("conservation check failed: %s", cons)
        return 4
    return 0


def _compare(args) -> int:
    rows = compare([load_report(p) for p in args.reports])
    print(format_table(rows))
    if args.csv:
        write_compare_csv(rows, args.csv)
    return 0


def _gen(args) -> int:
    spec = get_spec(args.spec)
    samples = generate(spec, args.n, args.seed)
    export_csv(samples, args.out)
    print(f"wrote {len(samples)} samples of {args.spec} to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holfree", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from an INI config")
    r.add_argument("--config", required=True)
    r.add_argument("--loader", choices=LOADERS)
    r.add_argument("--mode", choices=MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (default: config value or ./results)")
    r.set_defaults(func=_run)

    c = sub.add_parser("compare", help="compare two or more report.json files")
    c.add_argument("reports", nargs="+")
    c.add_argument("--csv", help="also write the table as CSV")
    c.set_defaults(func=_compare)

    g = sub.add_parser("gen-workload", help="export a synthetic workload as CSV")
    g.add_argument("--spec", required=True, choices=sorted(SPECS))
    g.add_argument("--out", required=True)
    g.add_argument("-n", type=int, default=None, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gen)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
