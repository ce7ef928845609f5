"""``gridflow worker``: run one polling client until interrupted."""
from __future__ import annotations

import argparse
import logging
import os
import signal

from gridflow.worker.client import Worker, WorkerConfig


def add_parser(sub: argparse._SubParsersAction):
    env = os.environ.get
    p = sub.add_parser("worker", help="run a grid client")
    p.add_argument("--server", default=env("GRIDFLOW_SERVER", "http://127.0.0.1:8180"))
    p.add_argument("--name", default=env("GRIDFLOW_CLIENT"), help="unique logical client name")
    p.add_argument("--dir", default=env("GRIDFLOW_DIR"), help="local base directory")
    p.add_argument("--group", default=env("GRIDFLOW_GROUP"))
    p.add_argument("--os", default=env("GRIDFLOW_OS", "unix"))
    p.add_argument("--time-scale", type=float, default=float(env("GRIDFLOW_TIME_SCALE", "1")),
                   help="divide sleep hints by this factor (virtual time)")
    p.add_argument("--retry-interval", type=float, default=30.0)
    p.add_argument("--max-cycles", type=int)
    p.set_defaults(func=main)


def main(args: argparse.Namespace) -> int:
    if not args.name or not args.dir:
        raise SystemExit("worker needs --name and --dir (or GRIDFLOW_CLIENT / GRIDFLOW_DIR)")
    cfg = WorkerConfig(
        server_url=args.server,
        client_name=args.name,
        base_dir=args.dir,
        group=args.group,
        os=args.os,
        time_scale=args.time_scale,
        retry_interval_s=args.retry_interval,
    )
    worker = Worker(cfg)
    signal.signal(signal.SIGTERM, lambda *_: worker.stop())
    logging.getLogger(__name__).info("worker %s polling %s", cfg.client_name, cfg.server_url)
    try:
        worker.poll_loop(args.max_cycles)
    except KeyboardInterrupt:
        pass
    return 0
