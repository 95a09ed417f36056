"""``mobigg <kind> --config PATH --seed N --out PATH [--threads N]``."""

from __future__ import annotations

import argparse
import sys

from .runner import run_experiment
from .schema import KINDS, SchemaError, load_spec

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mobigg", description="Mobile geometric graph experiments.")
    ap.add_argument("kind", help="one of: " + ", ".join(KINDS))
    ap.add_argument("--config", required=True, help="flat key = value config file")
    ap.add_argument("--seed", required=True, help="unsigned 64-bit master seed")
    ap.add_argument("--out", required=True, help="CSV output path; metadata goes to <out>.meta.json")
    ap.add_argument("--threads", type=int, default=None, help="worker threads (default: $MOBIGG_THREADS or 1)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        seed = int(args.seed)
        if args.threads is not None and args.threads < 1:
            raise SchemaError("--threads must be >= 1")
        spec = load_spec(args.kind, args.config, args.out, seed)
    except (SchemaError, ValueError) as exc:
        print(f"mobigg: invalid experiment: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        # prepare() inside run_experiment checks preconditions before any work
        run_experiment(spec, threads=args.threads)
    except SchemaError as exc:
        print(f"mobigg: invalid experiment: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"mobigg: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
