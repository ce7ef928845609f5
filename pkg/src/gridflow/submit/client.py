"""Blocking submission: post a workflow, wait for it, collect its rows."""
from __future__ import annotations

import hashlib
import time
from typing import Optional, Sequence, Union

from gridflow.client import EngineClient, EngineHTTPError
from gridflow.model import WorkflowDescription, encode_workflow
from gridflow.submit.workflow import PLATE_TEMPLATE, TEMPLATE_DIR, TEMPLATE_NAME, StudyError


class StudyTimeout(StudyError):
    def __init__(self, pending: Sequence[int], timeout_s: float):
        self.pending = list(pending)
        super().__init__(f"timed out after {timeout_s} s; pending tasks {self.pending}")


class TaskFailed(StudyError):
    def __init__(self, task_ids: Sequence[int]):
        self.task_ids = list(task_ids)
        super().__init__(f"tasks failed: {self.task_ids}")


def ensure_template(api: EngineClient, text: str = PLATE_TEMPLATE,
                    server_dir: str = TEMPLATE_DIR, name: str = TEMPLATE_NAME):
    """Upload the deck template unless the server already has this exact file."""
    try:
        meta = api.head(server_dir, name)
    except EngineHTTPError as exc:
        if exc.status != 404:
            raise
        meta = None
    data = text.encode()
    if meta is None or meta.md5 != hashlib.md5(data).hexdigest():
        api.upload(server_dir, name, data)


def wait_for(
    api: EngineClient,
    task_ids: Sequence[int],
    timeout_s: float = 600.0,
    poll_min_s: float = 0.02,
    poll_max_s: float = 1.0,
) -> dict[int, str]:
    """Poll Status with bounded exponential backoff until every task settles."""
    deadline = time.monotonic() + timeout_s
    delay = poll_min_s
    ids = list(task_ids)
    while True:
        tasks = api.status(ids, log=False)["tasks"]
        status = {t["task_id"]: t["status"] for t in tasks}
        failed = sorted(i for i, s in status.items() if s == "failed")
        if failed:
            raise TaskFailed(failed)
        pending = [i for i in ids if status.get(i) != "done"]
        if not pending:
            return status
        if time.monotonic() >= deadline:
            raise StudyTimeout(pending, timeout_s)
        time.sleep(min(delay, max(0.0, deadline - time.monotonic())))
        delay = min(poll_max_s, delay * 1.5)


def submit_and_wait(
    api: EngineClient,
    doc: Union[WorkflowDescription, str],
    timeout_s: float = 600.0,
    table: Optional[str] = None,
    sim_ids: Optional[Sequence[int]] = None,
) -> list[dict]:
    """Submit ``doc``, block until all its tasks are done, return result rows.

    Rows come from ``table`` (restricted to ``sim_ids`` when given); without a
    table the list is empty.
    """
    xml = doc if isinstance(doc, str) else encode_workflow(doc)
    ids = api.submit(xml)
    wait_for(api, ids, timeout_s)
    if table is None:
        return []
    rows = api.results(table, sim_ids)
    if sim_ids is not None:
        by_id = {r["SimID"]: r for r in rows}
        missing = [s for s in sim_ids if s not in by_id]
        if missing:
            raise StudyError(f"no result rows for sim ids {missing}")
        rows = [by_id[s] for s in sim_ids]
    return rows
