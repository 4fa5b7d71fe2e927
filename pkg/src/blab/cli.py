"""``blab`` command line: gen | train | metrics | dbg | compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from blab.config import load_config
from blab.errors import BlabError, ConfigError
from blab.harness import COMMANDS

log = logging.getLogger("blab")

U64_MAX = 2**64 - 1


def _u64(text: str) -> int:
    try:
        value = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must fit in an unsigned 64-bit integer: {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blab", description="Boundary-ambiguity experiments on synthetic long-tailed mixtures.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config (JSON)")
    parser.add_argument("--out", help="output directory; overrides output_dir in the config")
    parser.add_argument("--seed", type=_u64, help="override every stage seed")
    parser.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage, which is also our config-error code.
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, figures=not args.no_figures)
    except ConfigError as exc:
        print(f"blab: config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except BlabError as exc:
        print(f"blab: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"blab: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
