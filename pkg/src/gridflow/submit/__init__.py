"""Submission SDK: workflow building, blocking submission, studies."""
from gridflow.submit.client import StudyTimeout, TaskFailed, ensure_template, submit_and_wait, wait_for
from gridflow.submit.studies import (
    EngineObjective,
    LocalObjective,
    ObjectiveSpec,
    SAConfig,
    SAResult,
    robustness_sample,
    rows_to_csv,
    run_doe,
    sa_optimize,
)
from gridflow.submit.workflow import RunSpec, StudyError, StudyLayout, build_workflow

__all__ = [
    "EngineObjective",
    "LocalObjective",
    "ObjectiveSpec",
    "RunSpec",
    "SAConfig",
    "SAResult",
    "StudyError",
    "StudyLayout",
    "StudyTimeout",
    "TaskFailed",
    "build_workflow",
    "ensure_template",
    "robustness_sample",
    "rows_to_csv",
    "run_doe",
    "sa_optimize",
    "submit_and_wait",
    "wait_for",
]
