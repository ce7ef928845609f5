"""``gridflow submit doe|optimize|robust|workflow``."""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from gridflow.client import EngineClient
from gridflow.jobs.surrogate import R_STAR
from gridflow.submit.client import submit_and_wait, wait_for
from gridflow.submit.studies import (
    EngineObjective,
    ObjectiveSpec,
    SAConfig,
    robustness_sample,
    rows_to_csv,
    run_doe,
    sa_optimize,
)
from gridflow.submit.workflow import StudyError

DEFAULT_SERVER = "http://127.0.0.1:8180"


def _floats(text: str, n: int = 3) -> tuple[float, ...]:
    parts = [float(x) for x in text.split(",")]
    if len(parts) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return tuple(parts)


def _pair(text: str) -> tuple[float, ...]:
    return _floats(text, 2)


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def add_parser(sub: argparse._SubParsersAction):
    p = sub.add_parser("submit", help="submit workflows and run studies")
    ssub = p.add_subparsers(dest="study", required=True)

    def common(sp):
        sp.add_argument("--server", default=os.environ.get("GRIDFLOW_SERVER", DEFAULT_SERVER))
        sp.add_argument("--out", help="write CSV here instead of stdout")
        sp.add_argument("--timeout", type=float, default=600.0)

    d = ssub.add_parser("doe", help="uniform design of experiments")
    common(d)
    d.add_argument("--n", type=int, default=60)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--bounds", type=_pair, default=(1.0, 7.0), help="lo,hi in mm")
    d.add_argument("--design", help="CSV with columns r1,r2,r3 used instead of sampling")
    d.add_argument("--first-sim-id", type=int, default=1)

    o = ssub.add_parser("optimize", help="simulated annealing towards target frequencies")
    common(o)
    o.add_argument("--target", type=_floats, default=(28.0, 30.0, 33.0), help="f4,f5,f6 in kHz")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--max-evals", type=int, default=400)
    o.add_argument("--first-sim-id", type=int, default=1)

    r = ssub.add_parser("robust", help="normal sampling around a design point")
    common(r)
    r.add_argument("--sigma", type=float, default=0.01)
    r.add_argument("--n", type=int, default=2000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--center", type=_floats, default=R_STAR)
    r.add_argument("--cache", help="cache repository directory (default: temporary)")
    r.add_argument("--summary", help="write the per-mode quantile summary here")

    w = ssub.add_parser("workflow", help="submit a workflow document and wait for it")
    common(w)
    w.add_argument("file")
    w.add_argument("--table", help="print rows of this result table when done")
    p.set_defaults(func=main)


def main(args: argparse.Namespace) -> int:
    api = EngineClient(args.server)
    try:
        if args.study == "doe":
            table = None
            if args.design:
                with open(args.design, newline="") as fh:
                    table = [(float(r["r1"]), float(r["r2"]), float(r["r3"])) for r in csv.DictReader(fh)]
            rows = run_doe(api, args.n, tuple(args.bounds), args.seed, table=table,
                           first_sim_id=args.first_sim_id, timeout_s=args.timeout)
            _emit(rows_to_csv(rows), args.out)
        elif args.study == "optimize":
            objective = EngineObjective(api, ObjectiveSpec(f_star=tuple(args.target)),
                                        first_sim_id=args.first_sim_id, timeout_s=args.timeout)
            res = sa_optimize(objective, SAConfig(seed=args.seed, max_evals=args.max_evals))
            _emit(res.trace_csv(), args.out)
            print(
                f"r_best={','.join(repr(x) for x in res.r_best)} o_best={res.o_best!r} "
                f"evals={res.evals} converged={res.converged} on_boundary={res.on_boundary}",
                file=sys.stderr,
            )
        elif args.study == "robust":
            res = robustness_sample(args.center, args.sigma, args.n, args.seed,
                                    Path(args.cache) if args.cache else None)
            _emit(res.samples_csv(), args.out)
            if args.summary:
                Path(args.summary).write_text(res.summary_csv())
            else:
                sys.stderr.write(res.summary_csv())
        elif args.study == "workflow":
            xml = Path(args.file).read_text()
            if args.table:
                _emit(rows_to_csv(submit_and_wait(api, xml, args.timeout, args.table),
                                  _fields(api, args.table)), args.out)
            else:
                ids = api.submit(xml)
                status = wait_for(api, ids, args.timeout)
                _emit("task_id,status\n" + "".join(f"{i},{status[i]}\n" for i in ids), args.out)
    except StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _fields(api: EngineClient, table: str) -> list[str]:
    rows = api.results(table)
    fields = ["SimID"]
    for row in rows:
        fields += [k for k in row if k not in fields]
    return fields
