"""Command line entry point: xr-lab <stage> --config <file> [--seed N] [--out DIR]."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError
from .harness import STAGES, load_config, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xr-lab",
        description="Desk-scale reasoning post-training lab (SFT + GRPO + eval).",
    )
    parser.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", required=True, help="TOML run config file")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default=None, help="directory for output paths")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if cfg.stage != args.stage:
        print(
            f"config error: stage: config says {cfg.stage!r}, requested {args.stage!r}",
            file=sys.stderr,
        )
        return 2
    return run(args.config, seed=args.seed, out_dir=args.out)


if __name__ == "__main__":
    sys.exit(main())
