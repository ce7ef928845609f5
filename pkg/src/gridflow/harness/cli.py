"""``gridflow harness run <scenario>``: JSON pass/fail summary on stdout."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from gridflow.harness.scenarios import SCENARIOS, run_scenario


def add_parser(sub: argparse._SubParsersAction):
    p = sub.add_parser("harness", help="run acceptance scenarios on a local cluster")
    hsub = p.add_subparsers(dest="harness_cmd", required=True)
    r = hsub.add_parser("run", help="run one scenario, or all")
    r.add_argument("scenario", choices=[*SCENARIOS, "all"])
    r.add_argument("--workers", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--keep", help="keep cluster files under this directory")
    p.set_defaults(func=main)


def main(args: argparse.Namespace) -> int:
    names = list(SCENARIOS) if args.scenario == "all" else [args.scenario]
    reports = []
    for name in names:
        root = Path(args.keep) / name if args.keep else None
        rep = run_scenario(name, workers=args.workers, seed=args.seed, root=root)
        reports.append(rep.summary())
        if rep.diagnostics:
            print(rep.diagnostics, file=sys.stderr)
    out = reports[0] if len(reports) == 1 else {"passed": all(r["passed"] for r in reports), "scenarios": reports}
    json.dump(out, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0 if all(r["passed"] for r in reports) else 1
