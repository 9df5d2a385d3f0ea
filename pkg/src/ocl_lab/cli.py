"""Command-line front-end: run, validate, analyze.

run      execute the configured method x seed grid and write result files
validate parse a config and report problems without running anything
analyze  recompute the per-dimension inner-product diagnostic from a
         saved run snapshot
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import parse_config
from .errors import OclLabError
from .runner import compute_profile, load_snapshot, run, write_profile_csv


def _cmd_run(args) -> int:
    config = parse_config(args.config)
    report = run(config, out_dir=args.out, seed_override=args.seed_override)
    out = Path(args.out) if args.out else Path(config.output)
    for outcome in report.outcomes:
        status = "FAILED: " + outcome.error if not outcome.ok else (
            f"A_T={outcome.final_accuracy:.4f}"
            + (f" F_T={outcome.forgetting:.4f}" if outcome.forgetting is not None else "")
        )
        print(f"[{outcome.label} seed={outcome.seed}] {status} ({outcome.wall_seconds:.2f}s)")
    for label, stats in report.aggregates.items():
        line = f"{label}: A_T = {stats['mean_AT']:.4f} +/- {stats['ci95_AT']:.4f}"
        if "mean_FT" in stats:
            line += f", F_T = {stats['mean_FT']:.4f} +/- {stats['ci95_FT']:.4f}"
        print(line)
    print(f"results written to {out}")
    return 1 if report.failed else 0


def _cmd_validate(args) -> int:
    config = parse_config(args.config)
    methods = ", ".join(m.label for m in config.methods)
    print(
        f"OK: {config.dataset.kind} dataset, {config.task_count} tasks, "
        f"{len(config.seeds)} seed(s), methods: {methods}"
    )
    return 0


def _cmd_analyze(args) -> int:
    model, payload = load_snapshot(args.model)
    if not args.profile:
        meta = payload["meta"]
        print(f"snapshot: {meta['label']} seed={meta['seed']} ({meta['method']})")
        print(f"accumulated mask: {payload['accumulated'].astype(int).sum()} dims")
        print(f"buffered samples: {payload['buffer_samples'].shape[0]}")
        return 0
    profile = compute_profile(model, payload)
    print(f"old-class group mean: {profile.old_mean:+.6f}")
    print(f"new-class group mean: {profile.new_mean:+.6f}")
    if args.out_csv:
        write_profile_csv(profile, args.out_csv)
        print(f"profile written to {args.out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocl-lab",
        description="Desk-scale online continual-learning experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("--config", required=True, help="path to the experiment file")
    run_p.add_argument("--out", default=None, help="output directory (overrides the config)")
    run_p.add_argument("--seed-override", type=int, default=None,
                       help="run a single seed instead of the configured list")
    run_p.set_defaults(func=_cmd_run)

    val_p = sub.add_parser("validate", help="check a config without running")
    val_p.add_argument("--config", required=True)
    val_p.set_defaults(func=_cmd_validate)

    ana_p = sub.add_parser("analyze", help="diagnostics from a run snapshot")
    ana_p.add_argument("--model", required=True, help="path to a snapshot .npz")
    ana_p.add_argument("--profile", action="store_true",
                       help="decomposed inner-product profile of buffered samples")
    ana_p.add_argument("--out-csv", default=None, help="write the profile as CSV")
    ana_p.set_defaults(func=_cmd_analyze)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OclLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
