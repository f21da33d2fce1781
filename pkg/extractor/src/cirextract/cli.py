"""Command line: extract a bundle from a benchmark dataset layout."""

from __future__ import annotations

import argparse
import sys

from .config import ExtractionConfig
from .errors import ExtractorError
from .pipeline import export_bundle


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cirextract",
        description="Encode images/captions/LLM expansions into a retrieval bundle.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="run the full extraction pipeline")
    p.add_argument("--config", required=True, help="extraction config JSON")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--workers", type=int, default=None,
                   help="override the config's worker count")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args: argparse.Namespace) -> int:
    from dataclasses import replace
    config = ExtractionConfig.from_file(args.config)
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    out = export_bundle(config.adapter, config, args.out)
    print(f"bundle written to {out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
