"""Acceptance scenarios run against a live local cluster.

Every scenario records named checks in a :class:`ScenarioReport`; it reads the
engine only through HTTP (Status, Results, Billing) and never touches the
store file.
"""
from __future__ import annotations

import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from gridflow.client import EngineClient
from gridflow.harness.cluster import Cluster, ClusterError, ClusterSpec, FaultAction, spawn_cluster
from gridflow.jobs.mandelbrot import mandelbrot
from gridflow.jobs.surrogate import MODEL, R_BOUNDS, R_STAR
from gridflow.model import Column, ColumnType, JobSpec, TaskAttrs, TaskSpec, WorkflowDescription, encode_workflow
from gridflow.submit.client import wait_for
from gridflow.submit.studies import (
    EngineObjective,
    SAConfig,
    analytic_std,
    robustness_sample,
    rows_to_csv,
    run_doe,
    sa_optimize,
)
from gridflow.submit.workflow import StudyLayout

REQUEUE_KINDS = ("stale_requeue", "retry", "admin_requeue")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    scenario: str
    workers: int = 4
    seed: int = 0
    checks: list[Check] = field(default_factory=list)
    elapsed_s: float = 0.0
    data: dict = field(default_factory=dict)
    diagnostics: Optional[str] = None

    def check(self, name: str, passed: bool, detail: str = "") -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)

    def summary(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        out.pop("data")
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


# -- log analysis -------------------------------------------------------------


def duplicate_claims(events: Sequence[dict]) -> list[int]:
    """Tasks claimed while another client still held them."""
    holder: dict[int, str] = {}
    dups = []
    for e in events:
        kind, tid = e["kind"], e["task_id"]
        if kind == "claim":
            if tid in holder:
                dups.append(tid)
            holder[tid] = e["client"]
        elif kind in ("done", "failed", *REQUEUE_KINDS):
            holder.pop(tid, None)
    return dups


def claims_by_task(events: Sequence[dict]) -> dict[int, list[str]]:
    out: dict[int, list[str]] = {}
    for e in events:
        if e["kind"] == "claim":
            out.setdefault(e["task_id"], []).append(e["client"])
    return out


def first_event(events: Sequence[dict], kind: str, task_id: int) -> Optional[int]:
    for e in events:
        if e["kind"] == kind and e["task_id"] == task_id:
            return e["id"]
    return None


def surrogate_error(rows: Sequence[dict]) -> float:
    worst = 0.0
    for row in rows:
        f = MODEL.frequencies((row["r1"], row["r2"], row["r3"]))
        worst = max(worst, *(abs(a - row[k]) for a, k in zip(f, ("f4", "f5", "f6"))))
    return worst


def _diag(cluster: Cluster) -> str:
    try:
        status = json.dumps(cluster.api.status(), indent=1, default=str)[-20000:]
    except Exception as exc:  # the server may be the thing that broke
        status = f"status unavailable: {exc}"
    return f"=== status ===\n{status}\n=== logs ===\n{cluster.diagnostics()}"


@contextmanager
def _cluster(report: ScenarioReport, spec: ClusterSpec, root: Optional[Path] = None):
    cluster = spawn_cluster(spec, root)
    try:
        yield cluster
    finally:
        # checks run after teardown, so keep the evidence until the verdict
        report.data.setdefault("_diag", []).append(_diag(cluster))
        cluster.stop()


def _sub(root: Optional[Path], name: str) -> Optional[Path]:
    return root / name if root is not None else None


# -- workflow helpers -----------------------------------------------------------


def _tiny_job(out: Optional[str] = None) -> JobSpec:
    cols = [Column("Width", ColumnType.INTEGER, 4), Column("Height", ColumnType.INTEGER, 4),
            Column("MaxIter", ColumnType.INTEGER, 10)]
    if out:
        cols.append(Column("Output", ColumnType.VARCHAR, out))
    return JobSpec("JobMandelbrot", tuple(cols))


def _chain(n: int, group: str, pinned: bool = False, prefix: str = "chain",
           first_extra: Optional[dict] = None, last_extra: Optional[dict] = None) -> list[TaskSpec]:
    tasks = []
    for i in range(n):
        attrs = {}
        if i == 0:
            attrs = dict(start_task_chain=True, start_depends_on_client_group=group,
                         start_depends_on_group_node=pinned, **(first_extra or {}))
        if i == n - 1:
            attrs.update(close_task_chain=True, **(last_extra or {}))
        tasks.append(TaskSpec(f"{prefix}", (_tiny_job(),), TaskAttrs(**attrs)))
    return tasks


def _submit(api: EngineClient, tasks: Sequence[TaskSpec], timeout: float = 120.0) -> list[int]:
    ids = api.submit(encode_workflow(WorkflowDescription(tuple(tasks))))
    wait_for(api, ids, timeout)
    return ids


# -- scenarios ------------------------------------------------------------------


def scenario_doe(report: ScenarioReport, workers: int = 4, seed: int = 0,
                 root: Optional[Path] = None, n: int = 60, time_limit_s: float = 120.0):
    start = time.monotonic()
    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), root) as c:
        rows = run_doe(c.api, n, seed=seed, timeout_s=time_limit_s)
        wall = time.monotonic() - start
        status = c.api.status()
        report_csv = c.api.fetch_bytes("reports", f"PlateResults_001_{n:03d}.csv").decode()
    report.data["rows"] = rows
    report.data["csv"] = rows_to_csv(rows)
    report.check(f"{n} runs finish within {time_limit_s:.0f} s", wall < time_limit_s, f"{wall:.2f} s")
    report.check("one row per run", len(rows) == n and len({r["SimID"] for r in rows}) == n, str(len(rows)))
    err = surrogate_error(rows)
    report.check("f = f* + M(r - r*) to 1e-9", err <= 1e-9, f"max error {err:.3g} kHz")
    lo, hi = R_BOUNDS
    report.check("radii within bounds", all(lo <= r[k] <= hi for r in rows for k in ("r1", "r2", "r3")))
    dups = duplicate_claims(status["events"])
    report.check("no duplicate claims", not dups, str(dups))
    report.check("all tasks done", all(t["status"] == "done" for t in status["tasks"]))
    lines = report_csv.strip().splitlines()
    report.check("CreateReport uploaded one line per run", len(lines) == n + 1, f"{len(lines) - 1} rows")


def scenario_optimize(report: ScenarioReport, workers: int = 4, seed: int = 0,
                      root: Optional[Path] = None, max_evals: int = 400):
    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), root) as c:
        objective = EngineObjective(c.api)
        res = sa_optimize(objective, SAConfig(seed=seed, max_evals=max_evals))
        rows = c.api.results(objective.layout.table)
    report.data["result"] = res
    dist = max(abs(a - b) for a, b in zip(res.r_best, R_STAR))
    report.check("r within 0.01 mm of r*", dist <= 0.01, f"max |r - r*| = {dist:.2e} mm, r = {res.r_best}")
    report.check("objective < 1e-4 kHz^2", res.o_best < 1e-4, f"o = {res.o_best:.3e}")
    report.check(f"at most {max_evals} evaluations", res.evals <= max_evals, str(res.evals))
    report.check("every evaluation was an engine round trip",
                 objective.evals == res.evals == len(rows), f"{objective.evals} submitted, {len(rows)} rows")
    best = [t["o_best"] for t in res.trace]
    report.check("best-seen objective non-increasing", all(b <= a for a, b in zip(best, best[1:])))
    report.check("engine rows satisfy the surrogate", surrogate_error(rows) <= 1e-9)


def scenario_robust(report: ScenarioReport, workers: int = 4, seed: int = 0,
                    root: Optional[Path] = None, n: int = 2000, sigma: float = 0.01):
    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), root) as c:
        cache = c.root / "cache"
        first = robustness_sample(R_STAR, sigma, n, seed, cache)
        entries = sorted(p.name for p in (cache / "cache" / "surrogate_batch").iterdir() if not p.name.startswith("."))
        second = robustness_sample(R_STAR, sigma, n, seed, cache)
        c.api.upload("reports", "robustness_summary.csv", first.summary_csv().encode())
        c.api.upload("reports", "robustness_samples.csv", first.samples_csv().encode())
        served = c.api.fetch_bytes("reports", "robustness_summary.csv").decode()
    report.data["result"] = first
    expected = analytic_std(sigma)
    for mode, s in first.summary.items():
        rel = abs(s["std"] - expected[mode]) / expected[mode]
        report.check(f"{mode} std within 10% of analytic", rel <= 0.10,
                     f"{s['std']:.5f} vs {expected[mode]:.5f} ({rel:.1%})")
    half = 1.959963984540054 * expected["f4"]
    s4 = first.summary["f4"]
    tol = 0.1 * half
    ok = abs(s4["q025"] - (28 - half)) <= tol and abs(s4["q975"] - (28 + half)) <= tol
    report.check("mode-4 95% interval = 28 +- 0.0408 kHz", ok,
                 f"[{s4['q025']:.4f}, {s4['q975']:.4f}] vs [{28 - half:.4f}, {28 + half:.4f}] +- {tol:.4f}")
    report.check("repeat draw reuses the cache", len(entries) == 1 and first.samples_csv() == second.samples_csv(),
                 f"{len(entries)} cache entries")
    report.check("summary served by the repository", served == first.summary_csv())


def scenario_chain_group(report: ScenarioReport, workers: int = 4, seed: int = 0,
                         root: Optional[Path] = None):
    if workers < 2:
        raise ClusterError("chain_group needs at least two workers")
    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), root) as c:
        api = c.api
        names = c.spec.names

        # (a) chain order
        ids = _submit(api, _chain(20, "cluster", prefix="chain_a"))
        ev = api.status()["events"]
        done = [e["task_id"] for e in ev if e["kind"] == "done" and e["task_id"] in ids]
        claimed = [e["task_id"] for e in ev if e["kind"] == "claim" and e["task_id"] in ids]
        report.check("chain: completion order = chain order", done == ids, f"{len(done)} completions")
        report.check("chain: claim order = chain order", claimed == ids)

        # (b) group barrier: 4 branches of 3, then a follow-up task
        tasks: list[TaskSpec] = []
        branches = 4
        for b in range(branches):
            tasks += _chain(3, "cluster", prefix=f"branch_{b}",
                            first_extra={"start_task_group": b == 0},
                            last_extra={"close_task_group": b == branches - 1})
        tasks.append(TaskSpec("after", (_tiny_job(),), TaskAttrs(start_depends_on_client_group="cluster")))
        ids = _submit(api, tasks)
        st = api.status()
        by_id = {t["task_id"]: t for t in st["tasks"]}
        group_ids = [i for i in ids if by_id[i]["task_group"] is not None and not by_id[i]["is_monitor"]]
        monitor = [i for i in ids if by_id[i]["is_monitor"]]
        post = ids[-1]
        last_done = max(first_event(st["events"], "done", i) for i in group_ids)
        post_claim = first_event(st["events"], "claim", post)
        monitor_done = first_event(st["events"], "monitor_done", monitor[0]) if monitor else None
        report.check("barrier: follow-up claimed after every group task finished",
                     len(monitor) == 1 and post_claim is not None and post_claim > last_done
                     and monitor_done is not None and last_done < monitor_done < post_claim,
                     f"last group done #{last_done}, monitor #{monitor_done}, follow-up claim #{post_claim}")

        # (c) group-node pinning: three 5-task pinned chains in parallel branches
        tasks = []
        for b in range(3):
            tasks += _chain(5, "cluster", pinned=True, prefix=f"pinned_{b}",
                            first_extra={"start_task_group": b == 0},
                            last_extra={"close_task_group": b == 2})
        ids = _submit(api, tasks)
        st = api.status()
        by_id = {t["task_id"]: t for t in st["tasks"]}
        claims = claims_by_task(st["events"])
        chains = [ids[k * 5:(k + 1) * 5] for k in range(3)]
        owners = [{claims[i][0] for i in chain} for chain in chains]
        report.check("pinning: each 5-task chain ran on one worker",
                     all(len(o) == 1 for o in owners), str([sorted(o) for o in owners]))

        # (d) priority: direct-client task beats a lower-ID group task
        for n in names:
            c.inject_fault(FaultAction.PAUSE_POLLING, n)
        time.sleep(0.5)  # let in-flight requests land before submitting
        target = names[0]
        wf = [
            TaskSpec("prio_group", (_tiny_job(),), TaskAttrs(start_depends_on_client_group="cluster")),
            TaskSpec("prio_direct", (_tiny_job(),), TaskAttrs(start_depends_on_client=target)),
        ]
        ids = api.submit(encode_workflow(WorkflowDescription(tuple(wf))))
        mark = api.status()["events"][-1]["id"]
        c.inject_fault(FaultAction.RESUME, target)
        wait_for(api, [ids[1]], 60)
        for n in names[1:]:
            c.inject_fault(FaultAction.RESUME, n)
        wait_for(api, ids, 60)
        ev = [e for e in api.status()["events"] if e["id"] > mark and e["kind"] == "claim"]
        first_claim = next((e for e in ev if e["client"] == target), None)
        report.check("priority: direct task claimed before lower-ID group task",
                     first_claim is not None and first_claim["task_id"] == ids[1],
                     f"group task {ids[0]}, direct task {ids[1]}, first claim {first_claim and first_claim['task_id']}")

        # (e) 16 concurrent pollers over 200 tasks
        dup, lost = _poller_storm(c, pollers=16, tasks=200)
        report.check("16 pollers x 200 tasks: zero duplicate claims", not dup, f"duplicates {dup}")
        report.check("16 pollers x 200 tasks: every task claimed once and done", not lost, f"problems {lost}")

        st = api.status()
        report.check("no duplicate claims in the whole log", not duplicate_claims(st["events"]))


def _poller_storm(c: Cluster, pollers: int, tasks: int) -> tuple[list[int], list[int]]:
    group = "pollers"
    wf = [TaskSpec(f"p{i:03d}", (_tiny_job(),),
                   TaskAttrs(start_depends_on_client_group=group) if i == 0 else TaskAttrs())
          for i in range(tasks)]
    ids = c.api.submit(encode_workflow(WorkflowDescription(tuple(wf))))
    idset = set(ids)
    barrier = threading.Barrier(pollers)
    got: dict[str, list[int]] = {}
    errors: list[str] = []

    def run(name: str):
        api = EngineClient(c.url)
        mine = got.setdefault(name, [])
        barrier.wait()
        idle = 0
        try:
            while idle < 5:
                poll = api.poll(name, 0.0, 0, group, "unix")
                if poll.envelope is None:
                    idle += 1
                    time.sleep(0.02)
                    continue
                idle = 0
                mine.append(poll.envelope.task_id)
                api.task_completed(name, poll.envelope.task_id, 0, 0.0, 0.0, 0)
        except Exception as exc:
            errors.append(f"{name}: {exc}")
        finally:
            api.close()

    with ThreadPoolExecutor(pollers) as pool:
        list(pool.map(run, [f"poller-{i:02d}" for i in range(pollers)]))
    st = c.api.status()
    claims = claims_by_task([e for e in st["events"] if e["task_id"] in idset])
    dup = sorted(t for t, who in claims.items() if len(who) > 1)
    seen = [t for lst in got.values() for t in lst]
    dup += sorted({t for t in seen if seen.count(t) > 1})
    status = {t["task_id"]: t["status"] for t in st["tasks"] if t["task_id"] in idset}
    lost = sorted(t for t in ids if status.get(t) != "done" or t not in claims)
    if errors:
        lost.append(-1)
    return sorted(set(dup)), lost


def scenario_recovery(report: ScenarioReport, workers: int = 4, seed: int = 0,
                      root: Optional[Path] = None, n: int = 12, victim: Optional[str] = None,
                      solver_delay_s: float = 0.4):
    if workers < 2:
        raise ClusterError("recovery needs at least two workers")
    layout = StudyLayout(solver_delay_s=solver_delay_s)

    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), _sub(root, "baseline")) as c:
        base_rows = run_doe(c.api, n, seed=seed, layout=layout)
        base_snap = c.repository_snapshot()

    spec = ClusterSpec(worker_count=workers, seed=seed)
    victim = victim or spec.names[1]
    with _cluster(report, spec, _sub(root, "faulted")) as c:
        with ThreadPoolExecutor(1) as pool:
            fut = pool.submit(run_doe, c.api, n, seed=seed, layout=layout)
            killed_task = None
            for _ in range(5):
                deadline = time.monotonic() + 60
                while c.active_task(victim) is None and time.monotonic() < deadline and not fut.done():
                    time.sleep(0.01)
                if fut.done():
                    break
                c.inject_fault(FaultAction.KILL_WORKER, victim)
                time.sleep(0.1)  # a completion sent just before the kill lands first
                killed_task = c.active_task(victim)
                time.sleep(0.2)
                c.restart_worker(victim)
                if killed_task is not None:
                    break
            rows = fut.result()
        st = c.api.status()
        snap = c.repository_snapshot()

    report.data["rows"] = rows
    report.check("victim killed while holding a task", killed_task is not None, f"task {killed_task}")
    report.check("final CSV identical to the fault-free run", rows_to_csv(rows) == rows_to_csv(base_rows))
    diff = sorted(k for k in set(snap) | set(base_snap) if snap.get(k) != base_snap.get(k))
    report.check("final repository identical to the fault-free run", not diff, f"differences: {diff[:10]}")
    requeues = [e for e in st["events"] if e["kind"] == "stale_requeue"]
    report.check("victim's task set back to waiting exactly once",
                 killed_task is not None and [e["task_id"] for e in requeues] == [killed_task],
                 f"stale requeues {[(e['task_id'], e['client']) for e in requeues]}")
    report.check("no duplicate claims", not duplicate_claims(st["events"]))
    report.check("all tasks done", all(t["status"] == "done" for t in st["tasks"]))


def scenario_admin_rules(report: ScenarioReport, workers: int = 4, seed: int = 0,
                         root: Optional[Path] = None, n: int = 12):
    if workers < 3:
        raise ClusterError("admin_rules needs at least three workers")
    n_reserved = max(1, workers // 2)
    groups = [("cluster", "reserved") if i < n_reserved else ("cluster",) for i in range(workers)]
    spec = ClusterSpec(worker_count=workers, seed=seed, groups=groups)
    with _cluster(report, spec, root) as c:
        api = c.api
        names = c.spec.names
        suspended = names[:n_reserved]

        def client(name: str) -> dict:
            return next(x for x in api.status()["clients"] if x["name"] == name)

        before = {n: (client(n)["groups"], client(n)["sleep_min"], client(n)["sleep_max"]) for n in names}
        affected = api.admin(action="suspend_group", group="cluster", subset_group="reserved",
                             sleep_min=3600, sleep_max=3600)
        report.check("suspend hits exactly the subset", sorted(affected) == sorted(suspended), str(affected))
        ok = all(client(n)["groups"] == ["cluster_suspended", "reserved"] and client(n)["sleep_min"] == 3600
                 and client(n)["sleep_max"] == 3600 for n in suspended)
        report.check("suspended: cluster -> cluster_suspended, sleep 3600", ok)
        mark = api.status()["events"][-1]["id"]
        run_doe(api, n, seed=seed)
        claims = [e for e in api.status()["events"] if e["id"] > mark and e["kind"] == "claim"]
        bad = sorted({e["client"] for e in claims if e["client"] in suspended})
        report.check("suspended workers receive no group tasks", not bad and claims, f"claims by {bad}")

        api.admin(action="resume_group", group="cluster")
        after = {n: (client(n)["groups"], client(n)["sleep_min"], client(n)["sleep_max"]) for n in names}
        report.check("resume restores membership and sleep bounds 60/300",
                     after == before and all(after[n][1:] == (60, 300) for n in names),
                     json.dumps(after))
        run_doe(api, n, seed=seed + 1, first_sim_id=101)
        report.check("cluster drains after resume",
                     all(t["status"] == "done" for t in api.status(log=False)["tasks"]))

        last = names[-1]
        api.admin(action="set_sleeptime", clients=[last], sleep_min=10, sleep_max=20)
        row = client(last)
        report.check("set_sleeptime updates bounds", (row["sleep_min"], row["sleep_max"]) == (10, 20))
        api.configure_client(last, load_threshold=-1.0)
        held = api.admin(action="hold_high_load")
        report.check("hold_high_load holds the overloaded client", held == [last] and client(last)["on_hold"] == 1,
                     str(held))
        api.configure_client(last, load_threshold=1e9)
        api.admin(action="hold_high_load")
        report.check("hold released below threshold", client(last)["on_hold"] == 0)


def scenario_billing(report: ScenarioReport, workers: int = 4, seed: int = 0,
                     root: Optional[Path] = None, size: tuple[int, int, int] = (64, 64, 100)):
    w, h, it = size
    with _cluster(report, ClusterSpec(worker_count=workers, seed=seed), root) as c:
        api = c.api
        factors = {n: 1.0 + 0.5 * i for i, n in enumerate(c.spec.names)}
        for n, f in factors.items():
            api.configure_client(n, performance_factor=f)
        tasks = []
        k = max(2, 2 * workers)
        for i in range(k):
            job = JobSpec("JobMandelbrot", (
                Column("Width", ColumnType.INTEGER, w), Column("Height", ColumnType.INTEGER, h),
                Column("MaxIter", ColumnType.INTEGER, it), Column("Output", ColumnType.VARCHAR, "mandel.txt"),
            ))
            up = JobSpec("Upload", (Column("ServerDir", ColumnType.VARCHAR, f"bench/run_{i:02d}"),
                                    Column("File", ColumnType.VARCHAR, "mandel.txt")))
            attrs = TaskAttrs(start_depends_on_client_group="cluster") if i == 0 else TaskAttrs()
            tasks.append(TaskSpec(f"mandel_{i:02d}", (job, up), attrs))
        _submit(api, tasks, timeout=300)
        sums = []
        for i in range(k):
            text = api.fetch_bytes(f"bench/run_{i:02d}", "mandel.txt").decode()
            sums.append(int(dict(line.split("=", 1) for line in text.splitlines())["checksum"]))
        st = api.status()
        billed = dict(api.billing("client"))
        by_type = dict(api.billing("job_type"))

    expected_sum = mandelbrot(w, h, it)[1]
    report.check(f"Mandelbrot checksum ({w}, {h}, {it}) identical on every run",
                 len(set(sums)) == 1 and sums[0] == expected_sum, f"{sorted(set(sums))} vs local {expected_sum}")
    perf = {x["name"]: x["performance_factor"] for x in st["clients"]}
    oracle: dict[str, float] = {}
    for row in st["completions"]:
        oracle[row["client"]] = oracle.get(row["client"], 0.0) + row["runtime_s"] * perf[row["client"]] / max(
            1.0, row["load"])
    ok = set(oracle) == set(billed) and all(math.isclose(oracle[k], billed[k], rel_tol=1e-9) for k in oracle)
    report.check("billing per client matches the completion log", ok, json.dumps(billed))
    report.check("billing per job type sums to the same total",
                 set(by_type) == {"JobMandelbrot"}
                 and math.isclose(sum(by_type.values()), sum(billed.values()), rel_tol=1e-9), json.dumps(by_type))


SCENARIOS: dict[str, Callable] = {
    "doe": scenario_doe,
    "optimize": scenario_optimize,
    "robust": scenario_robust,
    "chain_group": scenario_chain_group,
    "recovery": scenario_recovery,
    "admin_rules": scenario_admin_rules,
    "billing": scenario_billing,
}


def run_scenario(name: str, workers: int = 4, seed: int = 0, root: Optional[Path] = None, **kw) -> ScenarioReport:
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    report = ScenarioReport(name, workers, seed)
    start = time.monotonic()
    try:
        SCENARIOS[name](report, workers=workers, seed=seed, root=root, **kw)
    except Exception as exc:
        report.check("scenario ran to completion", False, f"{type(exc).__name__}: {exc}")
    report.elapsed_s = time.monotonic() - start
    diag = report.data.pop("_diag", [])
    if not report.passed:
        report.diagnostics = "\n".join(diag) or None
    return report
