"""Command-line front end.

Subcommands:
  run <config.json>           run every configured (algorithm, seed) pair
  compare <summary.csv ...>   merge summary files into one aligned table
  partition-stats <config>    print per-device label histograms
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .experiment import (
    _build_data,
    compare_table,
    load_config,
    run_experiment,
)


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    records, summaries = run_experiment(
        cfg,
        out_dir=args.out_dir,
        threads=args.threads,
        seed_override=args.seed_override,
        cadence_override=args.cadence,
    )
    failures = [s for s in summaries if s.error is not None]
    ok = [s for s in summaries if s.error is None]
    if ok:
        _, aligned = compare_table(ok)
        print(aligned, end="")
    for s in failures:
        print(f"FAILED {s.algorithm} seed {s.seed}: {s.error}", file=sys.stderr)
    return 1 if failures else 0


def _read_summary_csv(path) -> list:
    summaries = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        expected = ["algorithm", "final_accuracy_mean", "final_accuracy_sd", "rounds_to_target_median"]
        if header != expected:
            raise ConfigError(f"{path}: unexpected summary header {header}")
        for line in fh:
            algo, mean, sd, med = line.strip().split(",")
            summaries.append((algo, float(mean), float(sd), med))
    return summaries


def _cmd_compare(args) -> int:
    rows = []
    for path in args.summaries:
        rows.extend(_read_summary_csv(path))
    rows.sort(key=lambda r: r[0])
    width = max(len("algorithm"), *(len(r[0]) for r in rows))
    print(f"{'algorithm':<{width}}  {'acc_mean':>10}  {'acc_sd':>10}  {'rounds':>8}")
    for algo, mean, sd, med in rows:
        print(f"{algo:<{width}}  {mean:>10.4f}  {sd:>10.4f}  {med:>8}")
    return 0


def _cmd_partition_stats(args) -> int:
    cfg = load_config(args.config)
    seed = (args.seed_override or cfg.seeds)[0]
    train, _, part = _build_data(cfg, seed)
    print(f"seed {seed}, scheme {part.scheme}, {part.n_devices} devices, {train.n} samples")
    for dev in range(part.n_devices):
        hist = part.label_histogram(train, dev)
        counts = " ".join(f"{k}:{c}" for k, c in enumerate(hist) if c > 0)
        print(f"device {dev:3d} (n={int(hist.sum()):4d}): {counts}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedflat", description="Desk-scale federated flat-minima training simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the experiment described by a config file")
    run_p.add_argument("config")
    run_p.add_argument("--seed-override", type=int, nargs="+", default=None)
    run_p.add_argument("--out-dir", default=None)
    run_p.add_argument("--threads", type=int, default=1)
    run_p.add_argument("--cadence", type=int, default=None)
    run_p.set_defaults(func=_cmd_run)

    cmp_p = sub.add_parser("compare", help="merge summary CSV files into one table")
    cmp_p.add_argument("summaries", nargs="+")
    cmp_p.set_defaults(func=_cmd_compare)

    ps_p = sub.add_parser("partition-stats", help="print per-device label histograms")
    ps_p.add_argument("config")
    ps_p.add_argument("--seed-override", type=int, nargs="+", default=None)
    ps_p.set_defaults(func=_cmd_partition_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
