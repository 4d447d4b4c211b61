"""Command-line entry point: generate / evaluate / dump-kernel / sweep."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .errors import ConfigError
from .harness import cmd_dump_kernel, cmd_evaluate, cmd_generate, parse_config


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", required=True, help="experiment config file")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--seed-offset", type=int, default=0, dest="seed_offset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectral-dice")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="sample and persist offline datasets")
    _add_common(gen)

    ev = sub.add_parser("evaluate", help="run the OPE sweep sequentially")
    _add_common(ev)

    sw = sub.add_parser("sweep", help="run the OPE sweep with a worker pool")
    _add_common(sw)
    sw.add_argument("--jobs", type=int, default=2)

    dk = sub.add_parser("dump-kernel", help="dump reconstructed kernel heatmaps")
    _add_common(dk)
    dk.add_argument("--rep", required=True, help="directory holding a saved representation")
    dk.add_argument("--state", type=int, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.out:
        cfg = replace(cfg, out_dir=args.out)

    if args.command == "generate":
        paths = cmd_generate(cfg, seed_offset=args.seed_offset)
        print(f"wrote {len(paths)} datasets to {cfg.out_dir}")
        return 0
    if args.command in ("evaluate", "sweep"):
        jobs = getattr(args, "jobs", 1)
        path, failed = cmd_evaluate(cfg, seed_offset=args.seed_offset, jobs=jobs)
        print(f"wrote {path} ({failed} failed cells)")
        return 1 if failed else 0
    if args.command == "dump-kernel":
        try:
            paths = cmd_dump_kernel(cfg, args.rep, args.state)
        except (FileNotFoundError, ValueError) as exc:
            print(f"dump-kernel error: {exc}", file=sys.stderr)
            return 1
        print(f"wrote {len(paths)} heatmaps to {cfg.out_dir}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
