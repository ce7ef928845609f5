"""Simulated annealing towards target frequencies, one engine round trip per evaluation."""
import argparse
from pathlib import Path

from gridflow.harness import ClusterSpec, spawn_cluster
from gridflow.submit import EngineObjective, ObjectiveSpec, SAConfig, sa_optimize


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--target", type=float, nargs=3, default=[28.0, 30.0, 33.0], metavar=("F4", "F5", "F6"))
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--max-evals", type=int, default=400)
    ap.add_argument("--out", type=Path, default=Path("sa_trace.csv"))
    args = ap.parse_args()

    with spawn_cluster(ClusterSpec(worker_count=args.workers, seed=args.seed)) as cluster:
        objective = EngineObjective(cluster.api, ObjectiveSpec(f_star=tuple(args.target)))
        res = sa_optimize(objective, SAConfig(seed=args.seed, max_evals=args.max_evals))
    args.out.write_text(res.trace_csv())
    r = ", ".join(f"{x:.4f}" for x in res.r_best)
    print(f"r = ({r}) mm, o = {res.o_best:.3e} kHz^2, {res.evals} evaluations, "
          f"converged={res.converged}, on_boundary={res.on_boundary} -> {args.out}")


if __name__ == "__main__":
    main()
