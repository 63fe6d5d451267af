"""Command-line entry point.

Subcommands: init (emit a config template), synth, replay, analyze,
counterfactual, report, and run (all stages).  Log verbosity comes from
the MKTSPECTRO_LOG environment variable (DEBUG/INFO/WARNING/ERROR).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .pipeline import (
    ALL_STAGES,
    CONFIG_TEMPLATE,
    ConfigError,
    PipelineConfig,
    StageError,
    load_config,
    run_pipeline,
)

log = logging.getLogger("mktspectro")

_STAGE_SETS = {
    "synth": ("inputs",),
    "replay": ("inputs", "replay"),
    "analyze": ("inputs", "replay", "analyze"),
    "counterfactual": ("inputs", "replay", "analyze", "counterfactual"),
    "report": ("inputs", "replay", "analyze", "counterfactual", "report"),
    "run": ALL_STAGES,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mktspectro",
        description="Order-flow replay, net-return accounting, random-timing "
                    "counterfactuals, and power-law reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init", help="write a commented configuration template")
    init.add_argument("--out", type=Path, default=None,
                      help="file to write (default: stdout)")

    for name, help_text in (
        ("synth", "generate the synthetic input corpus"),
        ("replay", "replay order flow into a fills audit file"),
        ("analyze", "compute per-investor performance"),
        ("counterfactual", "run the random-timing benchmark"),
        ("report", "produce all analysis reports"),
        ("run", "run every stage and write the manifest"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=True, help="pipeline configuration file")
        p.add_argument("--workers", type=int, default=1, help="parallel workers (results identical)")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", type=Path, default=None, help="override the output directory")
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("MKTSPECTRO_LOG", "WARNING").upper()
    level = getattr(logging, level_name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)

    if args.command == "init":
        if args.out is None:
            sys.stdout.write(CONFIG_TEMPLATE)
        else:
            args.out.write_text(CONFIG_TEMPLATE, encoding="utf-8")
            log.info("wrote %s", args.out)
        return 0

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.out = args.out
    if args.command == "replay":
        config.write_fills = True

    try:
        result = run_pipeline(config, workers=args.workers, stages=_STAGE_SETS[args.command])
    except ConfigError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for d in result.diagnostics.errors:
        print(f"diagnostic: {d}", file=sys.stderr)
    n_warn = len(result.diagnostics.warnings)
    print(f"wrote {len(result.outputs)} files to {config.out}"
          + (f" ({n_warn} warnings)" if n_warn else ""))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
