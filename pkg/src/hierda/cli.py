"""Command-line entry point.

    hierda run <config.json> [--out DIR] [--workers N] [--force] [--cov-error]
    hierda sensitivity <config.json> [--out DIR] [--force]
    hierda validate <config.json>

Without ``--out`` the output directory is ``config.output_dir`` or
``$HIERDA_OUTPUT_ROOT/<name>`` (default root ``./hierda-runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import (
    OUTPUT_ROOT_ENV,
    ConfigError,
    load_config,
    resolve_output_dir,
    run_experiment,
    run_sensitivity_study,
)

log = logging.getLogger("hierda")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hierda", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<name>)")
    run.add_argument("--workers", type=int, default=1, help="parallel forward runs / member updates")
    run.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    run.add_argument("--cov-error", action="store_true", help="also write the L L^T - C error map")

    sens = sub.add_parser("sensitivity", help="ensemble vs hybrid sensitivity study")
    sens.add_argument("config")
    sens.add_argument("--out")
    sens.add_argument("--force", action="store_true")

    val = sub.add_parser("validate", help="check a config file")
    val.add_argument("config")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config)
        if args.command == "validate":
            print(f"{args.config}: ok ({cfg['problem']}, method={cfg.get('method', '-')}, seed={cfg['seed']})")
            return 0
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        out = resolve_output_dir(cfg, args.out)
        if args.command == "sensitivity":
            manifest = run_sensitivity_study(cfg, out, force=args.force)
        else:
            manifest = run_experiment(cfg, out, workers=args.workers, force=args.force, cov_error=args.cov_error)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - report module errors with a nonzero exit
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(manifest["summary"], indent=2, sort_keys=True))
    print(f"artifacts written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
