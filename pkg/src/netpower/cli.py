"""Command-line front end: ``netpower <command> --config FILE [--set section.key=value ...]``.

Exit status: 0 success, 1 a pipeline stage failed (named on stderr and in
status.json), 2 usage or configuration error (the offending key is named).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional

from .config import ConfigError, RunConfig, load_config
from .pipeline import COMMANDS, OUT_ENV, run


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netpower", description="Per-cycle post-layout power prediction pipeline.")
    ap.add_argument("command", choices=COMMANDS + ("defaults",),
                    help="pipeline stage, 'all' for the full chain, or 'defaults' to print the default config")
    ap.add_argument("-c", "--config", help="INI configuration file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (repeatable)")
    ap.add_argument("--out", help=f"output root (overrides paths.out; the {OUT_ENV} variable wins over both)")
    ap.add_argument("--force", action="store_true", help="rerun stages even when their stamps are current")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "defaults":
        sys.stdout.write(RunConfig().to_ini())
        return 0
    if not args.config:
        print("netpower: error: --config is required", file=sys.stderr)
        return 2
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"paths.out={args.out}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"netpower: config error: {exc}", file=sys.stderr)
        return 2
    code = run(cfg, args.command, force=args.force)
    out = os.environ.get(OUT_ENV) or cfg.paths.out
    if code:
        import json
        with open(os.path.join(out, "status.json")) as fh:
            st = json.load(fh)
        failed = st.get("failed_stage", "?")
        print(f"netpower: {st['stages'][failed].get('error', 'stage failed')}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
