"""Command line entry point: ``python -m gridflow server|worker|submit|harness``."""
from __future__ import annotations

import argparse
import logging
import sys


def build_parser() -> argparse.ArgumentParser:
    from gridflow.harness import cli as harness_cli
    from gridflow.server import cli as server_cli
    from gridflow.submit import cli as submit_cli
    from gridflow.worker import cli as worker_cli

    parser = argparse.ArgumentParser(prog="gridflow")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)
    for mod in (server_cli, worker_cli, submit_cli, harness_cli):
        mod.add_parser(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
