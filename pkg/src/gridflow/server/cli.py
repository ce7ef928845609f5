"""``gridflow server``: run the engine over HTTP."""
from __future__ import annotations

import argparse
from dataclasses import replace

from gridflow.server.app import serve
from gridflow.server.config import ServerConfig


def add_parser(sub: argparse._SubParsersAction):
    p = sub.add_parser("server", help="run the workflow engine")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--repository")
    p.add_argument("--store")
    p.add_argument("--sleep-min", type=float)
    p.add_argument("--sleep-max", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=main)


def main(args: argparse.Namespace) -> int:
    cfg = ServerConfig.from_file(args.config) if args.config else ServerConfig()
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k in ServerConfig.__dataclass_fields__ and v is not None
    }
    cfg = replace(cfg, **overrides)
    serve(cfg)
    return 0
