import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import lsq_linear

from gridflow.jobs.surrogate import F_STAR, MODEL, R_STAR, SENSITIVITY
from gridflow.model import decode_workflow, encode_workflow, plan_workflow
from gridflow.submit import studies
from gridflow.submit.client import StudyTimeout, TaskFailed, submit_and_wait
from gridflow.submit.studies import (
    LocalObjective,
    ObjectiveSpec,
    SAConfig,
    analytic_std,
    read_csv_rows,
    robustness_sample,
    rows_to_csv,
    run_doe,
    sa_optimize,
    sample_uniform,
)
from gridflow.submit.workflow import RunSpec, StudyError, StudyLayout, build_workflow

M = np.array(SENSITIVITY)


def surrogate_np(r):
    return np.array(F_STAR) + M @ (np.asarray(r) - np.array(R_STAR))


# -- workflow building ----------------------------------------------------------

def test_single_run_is_one_pinned_chain():
    wf = build_workflow([RunSpec(1, (2.0, 3.0, 4.0))])
    assert [t.client_dir for t in wf.tasks] == ["ansys_001"] * 3 + ["temp"]
    head = wf.tasks[0].attrs
    assert head.start_task_chain and head.start_depends_on_group_node
    assert head.start_depends_on_client_group == "cluster"
    assert wf.tasks[-1].attrs.close_task_chain
    uploads = [j for t in wf.tasks for j in t.jobs if j.job_type == "Upload"]
    assert {dict((c.name, c.value) for c in j.columns)["ServerDir"] for j in uploads} == {"results/sim_001"}
    replace = wf.tasks[0].jobs[1]
    assert {c.name: c.value for c in replace.columns if c.name.startswith("r")} == {"r1": 2.0, "r2": 3.0, "r3": 4.0}
    plan = plan_workflow(wf)
    assert [p.depends_on for p in plan] == [None, 0, 1, 2]
    assert [p.group_node for p in plan] == [False, True, True, True]


def test_batch_is_group_with_report():
    runs = [RunSpec(i, (2.0, 3.0, 4.0)) for i in (5, 6, 7)]
    wf = build_workflow(runs)
    assert decode_workflow(encode_workflow(wf)) == wf
    plan = plan_workflow(wf)
    # 3 x 4 tasks, the monitor, the report
    assert len(plan) == 14
    monitor = plan[12]
    assert monitor.is_monitor
    assert plan[13].depends_on == 12
    report = plan[13].spec.jobs[0]
    cols = {c.name: c.value for c in report.columns}
    assert cols["File"] == "PlateResults_005_007.csv" and cols["SimIDs"] == "5 6 7"
    heads = [p for p in plan[:12] if p.depends_on is None]
    assert len(heads) == 3


def test_batch_of_one():
    wf = build_workflow([RunSpec(1, (2.0, 3.0, 4.0))], batch=True)
    assert len(plan_workflow(wf)) == 6


@pytest.mark.parametrize("r", [(0.5, 3, 3), (3, 3, 7.5), (3, 3)])
def test_invalid_run_rejected(r):
    with pytest.raises(StudyError):
        RunSpec(1, r)


def test_duplicate_or_empty_runs_rejected():
    with pytest.raises(StudyError, match="duplicate"):
        build_workflow([RunSpec(1, (2, 2, 2)), RunSpec(1, (3, 3, 3))])
    with pytest.raises(StudyError):
        build_workflow([])


# -- DOE sampling -------------------------------------------------------------

def test_sample_uniform_bounds_and_seed():
    pts = sample_uniform(500, (1.0, 7.0), seed=3)
    assert np.asarray(pts).min() >= 1.0 and np.asarray(pts).max() <= 7.0
    assert pts == sample_uniform(500, (1.0, 7.0), seed=3)
    assert pts != sample_uniform(500, (1.0, 7.0), seed=4)
    with pytest.raises(StudyError):
        sample_uniform(0)
    with pytest.raises(StudyError):
        sample_uniform(5, (0.0, 7.0))


def test_csv_roundtrip():
    rows = [{"SimID": 1, "r1": 1.1, "r2": 2.2, "r3": 3.3, "f4": 28.000000000001, "f5": 30.0, "f6": 33.0}]
    assert read_csv_rows(rows_to_csv(rows)) == rows


# -- annealing ----------------------------------------------------------------

def _lsq_oracle(target):
    # minimise |f(r) - target|^2 over the box: a bounded linear least-squares problem
    b = np.asarray(target) - np.array(F_STAR) + M @ np.array(R_STAR)
    res = lsq_linear(M, b, bounds=(1.0, 7.0), tol=1e-12)
    return res.x, float(np.sum((M @ res.x - b) ** 2))


@pytest.mark.parametrize("seed", range(10))
def test_sa_recovers_optimum_locally(seed):
    obj = LocalObjective()
    res = sa_optimize(obj, SAConfig(seed=seed))
    assert res.evals <= 400 and obj.evals == res.evals
    assert res.o_best < 1e-4
    assert np.max(np.abs(np.array(res.r_best) - R_STAR)) < 0.01
    assert res.converged and not res.on_boundary


def test_sa_start_at_optimum_stops_immediately():
    res = sa_optimize(LocalObjective(), SAConfig(r0=R_STAR))
    assert res.evals == 1 and res.converged and res.o_best < 1e-20


def test_sa_deterministic_for_seed():
    a = sa_optimize(LocalObjective(), SAConfig(seed=11, max_evals=80))
    b = sa_optimize(LocalObjective(), SAConfig(seed=11, max_evals=80))
    assert a.trace == b.trace
    assert a.trace_csv() == b.trace_csv()


def test_sa_respects_budget_and_bounds():
    res = sa_optimize(LocalObjective(), SAConfig(seed=1, max_evals=25))
    assert res.evals == 25
    rs = np.array([[t["r1"], t["r2"], t["r3"]] for t in res.trace])
    assert rs.min() >= 1.0 and rs.max() <= 7.0
    best = [t["o_best"] for t in res.trace]
    assert best == sorted(best, reverse=True)


@pytest.mark.parametrize("target", [(60.0, 60.0, 60.0), (10.0, 10.0, 10.0)])
def test_sa_infeasible_corner_matches_lsq(target):
    r_opt, o_opt = _lsq_oracle(target)
    res = sa_optimize(LocalObjective(ObjectiveSpec(f_star=target)), SAConfig(seed=0))
    assert res.on_boundary
    np.testing.assert_allclose(res.r_best, r_opt, atol=1e-3)
    assert res.o_best == pytest.approx(o_opt, rel=1e-4)


def test_sa_infeasible_mixed_boundary_objective_close():
    # one radius pinned, the rest interior; the objective is reliable, r is flat-ish
    target = (40.0, 20.0, 33.0)
    _, o_opt = _lsq_oracle(target)
    res = sa_optimize(LocalObjective(ObjectiveSpec(f_star=target)), SAConfig(seed=0))
    assert res.on_boundary
    assert o_opt <= res.o_best <= o_opt * 1.01


def test_sa_config_validation():
    for bad in [dict(cooling=1.0), dict(t0=0), dict(steps_per_temp=0), dict(bounds=(3, 3))]:
        with pytest.raises(ValueError):
            SAConfig(**bad)


# -- robustness ---------------------------------------------------------------

def test_analytic_std_values():
    expected = {f"f{m}": 0.01 * float(np.linalg.norm(row)) for m, row in zip((4, 5, 6), M)}
    assert analytic_std(0.01) == pytest.approx(expected, rel=1e-12)
    assert analytic_std(0.01)["f4"] == pytest.approx(0.0208327, abs=1e-7)


def test_zero_sigma_collapses_to_point(tmp_path):
    res = robustness_sample(R_STAR, 0.0, 50, seed=0, repository=tmp_path)
    for name, f in zip(("f4", "f5", "f6"), F_STAR):
        s = res.summary[name]
        assert s["std"] == 0 and s["mean"] == pytest.approx(f, abs=1e-12)


def test_large_sample_matches_analytic(tmp_path):
    sigma, n = 0.01, 10_000
    res = robustness_sample(R_STAR, sigma, n, seed=5, repository=tmp_path)
    expected = analytic_std(sigma)
    for k, name in enumerate(("f4", "f5", "f6")):
        s = res.summary[name]
        # sampling error of a std estimate is about std / sqrt(2n), well under 3%
        assert abs(s["std"] / expected[name] - 1) < 0.03
        assert abs(s["mean"] - F_STAR[k]) < 4 * expected[name] / np.sqrt(n)
        half = 1.959964 * expected[name]
        assert s["q025"] == pytest.approx(F_STAR[k] - half, abs=0.1 * half)
        assert s["q975"] == pytest.approx(F_STAR[k] + half, abs=0.1 * half)
    pts = np.array([[s["r1"], s["r2"], s["r3"]] for s in res.samples[:20]])
    got = np.array([[s["f4"], s["f5"], s["f6"]] for s in res.samples[:20]])
    np.testing.assert_allclose(got, [surrogate_np(p) for p in pts], atol=1e-12)


def test_robustness_reuses_cache(tmp_path, monkeypatch):
    calls = []
    real = studies._evaluate_samples

    def counting(inputs, out_dir):
        calls.append(1)
        real(inputs, out_dir)

    monkeypatch.setattr(studies, "_evaluate_samples", counting)
    a = robustness_sample(R_STAR, 0.01, 200, seed=1, repository=tmp_path)
    b = robustness_sample(R_STAR, 0.01, 200, seed=1, repository=tmp_path)
    assert len(calls) == 1 and a.summary == b.summary


def test_robustness_rejects_bad_input():
    with pytest.raises(StudyError):
        robustness_sample(R_STAR, -1.0, 10)
    with pytest.raises(StudyError):
        robustness_sample(R_STAR, 0.01, 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.001, 0.05), st.integers(0, 1000))
def test_robustness_samples_within_bounds(sigma, seed):
    res = robustness_sample((1.01, 6.99, 4.0), sigma, 100, seed=seed)
    arr = np.array([[s["r1"], s["r2"], s["r3"]] for s in res.samples])
    assert arr.min() >= 1.0 and arr.max() <= 7.0


# -- against a live engine ------------------------------------------------------

def test_doe_corner_table(live):
    live.add_worker("node-01")
    live.add_worker("node-02")
    corners = list(itertools.product((1.0, 7.0), repeat=3))
    rows = run_doe(live.api, table=corners, timeout_s=60)
    assert [r["SimID"] for r in rows] == list(range(1, 9))
    for row, r in zip(rows, corners):
        assert (row["r1"], row["r2"], row["r3"]) == r
        np.testing.assert_allclose([row["f4"], row["f5"], row["f6"]], surrogate_np(r), atol=1e-9)
    report = live.api.fetch_bytes("reports", "PlateResults_001_008.csv").decode()
    assert len(report.strip().splitlines()) == 9


def test_doe_rejects_empty(live):
    with pytest.raises(StudyError):
        run_doe(live.api, n=0)


def test_submit_and_wait_one_row(live):
    live.add_worker("node-01")
    from gridflow.submit.client import ensure_template

    ensure_template(live.api)
    rows = submit_and_wait(live.api, build_workflow([RunSpec(3, (2.0, 4.0, 6.0))]), 30, "PlateResults", [3])
    assert len(rows) == 1 and rows[0]["SimID"] == 3
    np.testing.assert_allclose([rows[0][k] for k in ("f4", "f5", "f6")], MODEL.frequencies((2.0, 4.0, 6.0)),
                               atol=1e-9)


def test_submit_and_wait_missing_template_fails(live):
    live.add_worker("node-01")
    layout = StudyLayout(template="does_not_exist.dat")
    with pytest.raises(TaskFailed) as info:
        submit_and_wait(live.api, build_workflow([RunSpec(1, (2.0, 4.0, 6.0))], layout), 30)
    assert len(info.value.task_ids) == 1


def test_submit_and_wait_times_out_without_workers(live):
    with pytest.raises(StudyTimeout) as info:
        submit_and_wait(live.api, build_workflow([RunSpec(1, (2.0, 4.0, 6.0))]), timeout_s=0.5)
    assert len(info.value.pending) == 4
