"""Workflow documents for the plate study.

Each run is a chain of four tasks pinned to one node of the worker group:

1. download the deck template and substitute the radii (JobReplaceTag)
2. run the solver (JobSurrogateSim)
3. parse the frequencies and upload them with the value log
4. download the uploaded results and insert them into the result table

Ingestion goes through the HTTP API, so the pinned node runs it as well.

A batch puts every run in its own branch of one task group, closed by a
monitor and followed by a report task.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

from gridflow.jobs.surrogate import R_BOUNDS
from gridflow.model import (
    Column,
    ColumnType,
    JobSpec,
    TaskAttrs,
    TaskSpec,
    WorkflowDescription,
)

TEMPLATE_DIR = "models"
TEMPLATE_NAME = "plate_template.dat"
RESULTS_DIR = "results"
REPORT_DIR = "reports"
DEFAULT_TABLE = "PlateResults"
DEFAULT_GROUP = "cluster"

# Three holes in a 60 x 60 mm plate.  Radii are tags; everything else is
# opaque to the engine.
PLATE_TEMPLATE = """\
/PREP7
! plate with three holes, dimensions in mm
ET,1,PLANE42
MP,EX,1,210000
MP,PRXY,1,0.3
MP,DENS,1,7.85E-9
BLC4,0,0,60,60
CYL4,15,45,<TAG ID="r1"/>
CYL4,45,45,<TAG ID="r2"/>
CYL4,30,15,<TAG ID="r3"/>
ASBA,1,ALL
ESIZE,1.5
AMESH,ALL
/SOLU
ANTYPE,MODAL
MODOPT,LANB,6
SOLVE
FINISH
"""


class StudyError(RuntimeError):
    """A submitted workflow failed or could not be built."""


@dataclass(frozen=True)
class RunSpec:
    sim_id: int
    r: tuple[float, float, float]

    def __post_init__(self):
        if self.sim_id < 0:
            raise StudyError(f"negative sim id {self.sim_id}")
        if len(self.r) != 3:
            raise StudyError(f"expected 3 radii, got {len(self.r)}")
        lo, hi = R_BOUNDS
        for i, ri in enumerate(self.r, start=1):
            if not lo <= ri <= hi:
                raise StudyError(f"sim {self.sim_id}: r{i}={ri} mm outside [{lo}, {hi}]")


@dataclass(frozen=True)
class StudyLayout:
    table: str = DEFAULT_TABLE
    group: str = DEFAULT_GROUP
    template_dir: str = TEMPLATE_DIR
    template: str = TEMPLATE_NAME
    timeout_s: int = 1000
    solver_delay_s: float = 0.0
    report_name: Optional[str] = None
    erase_on_exit: bool = False


def _job(job_type: str, timeout: Optional[int] = None, **cols) -> JobSpec:
    columns = []
    for name, value in cols.items():
        if isinstance(value, float):
            ctype = ColumnType.DOUBLE
        elif isinstance(value, int):
            ctype = ColumnType.INTEGER
        else:
            ctype = ColumnType.VARCHAR
        columns.append(Column(name, ctype, value))
    return JobSpec(job_type, tuple(columns), timeout)


def run_tasks(run: RunSpec, layout: StudyLayout, first: TaskAttrs, last: TaskAttrs) -> list[TaskSpec]:
    work = f"ansys_{run.sim_id:03d}"
    upload_dir = f"{RESULTS_DIR}/sim_{run.sim_id:03d}"
    r1, r2, r3 = (float(x) for x in run.r)
    sim_cols = {"Input": "inputdeck_mod.dat", "Output": "solve.out"}
    if layout.solver_delay_s:
        sim_cols["Delay"] = float(layout.solver_delay_s)
    tasks = [
        TaskSpec(
            work,
            (
                _job("Download", ServerDir=layout.template_dir, File=layout.template),
                _job(
                    "JobReplaceTag",
                    Input=layout.template,
                    Output="inputdeck_mod.dat",
                    Logfile="values.log",
                    r1=r1,
                    r2=r2,
                    r3=r3,
                ),
            ),
            first,
        ),
        TaskSpec(work, (_job("JobSurrogateSim", layout.timeout_s, **sim_cols),)),
        TaskSpec(
            work,
            (
                _job(
                    "JobParseEigenfreq",
                    layout.timeout_s,
                    Input="solve.out",
                    Freqfile="eigenfreq.asc",
                    Modefile="eigenmode.asc",
                ),
                _job("Upload", ServerDir=upload_dir, File="eigenfreq.asc"),
                _job("Upload", ServerDir=upload_dir, File="eigenmode.asc"),
                _job("Upload", ServerDir=upload_dir, File="values.log"),
            ),
        ),
        TaskSpec(
            "temp",
            (
                _job("Download", ServerDir=upload_dir, File="eigenfreq.asc"),
                _job("Download", ServerDir=upload_dir, File="values.log"),
                _job(
                    "JobInsertResults",
                    Tablename=layout.table,
                    Datafile="eigenfreq.asc",
                    Logfile="values.log",
                    SimID=run.sim_id,
                ),
            ),
            last,
        ),
    ]
    if layout.erase_on_exit:
        tasks = [TaskSpec(t.client_dir, t.jobs, _with(t.attrs, erase_on_exit=True)) for t in tasks]
    return tasks


def _with(attrs: TaskAttrs, **changes) -> TaskAttrs:
    return replace(attrs, **changes)


def build_workflow(
    runs: Sequence[RunSpec],
    layout: StudyLayout = StudyLayout(),
    batch: Optional[bool] = None,
) -> WorkflowDescription:
    """Assemble the workflow for ``runs``.

    A single run becomes one pinned chain.  Several runs (or ``batch=True``)
    become parallel branches of a group followed by a report task.
    """
    runs = list(runs)
    if not runs:
        raise StudyError("no runs to submit")
    ids = [r.sim_id for r in runs]
    if len(set(ids)) != len(ids):
        raise StudyError(f"duplicate sim ids in {ids}")
    if batch is None:
        batch = len(runs) > 1
    head = TaskAttrs(
        start_task_chain=True,
        start_depends_on_group_node=True,
        start_depends_on_client_group=layout.group,
    )
    tail = TaskAttrs(close_task_chain=True)

    if not batch:
        (run,) = runs
        return WorkflowDescription(tuple(run_tasks(run, layout, head, tail)))

    tasks: list[TaskSpec] = []
    for i, run in enumerate(runs):
        first = _with(head, start_task_group=(i == 0))
        last = _with(tail, close_task_group=(i == len(runs) - 1))
        tasks += run_tasks(run, layout, first, last)
    report = layout.report_name or f"{layout.table}_{ids[0]:03d}_{ids[-1]:03d}.csv"
    tasks.append(
        TaskSpec(
            "report",
            (
                _job(
                    "CreateReport",
                    Tablename=layout.table,
                    File=report,
                    ServerDir=REPORT_DIR,
                    SimIDs=" ".join(str(i) for i in ids),
                ),
            ),
            TaskAttrs(start_depends_on_client_group=layout.group),
        )
    )
    return WorkflowDescription(tuple(tasks))
