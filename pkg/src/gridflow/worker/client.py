"""The polling grid client."""
from __future__ import annotations

import logging
import shutil
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import requests

from gridflow.client import EngineClient, EngineHTTPError
from gridflow.jobs.base import (
    IO_ERROR,
    JOB_FAILED,
    NETWORK_ERROR,
    OK,
    TIMEOUT,
    UNKNOWN_JOB,
    JobContext,
    JobError,
)
from gridflow.model import TaskEnvelope, check_client_dir
from gridflow.worker.metrics import report_metrics
from gridflow.worker.registry import JobRegistry
from gridflow.worker.scripts import normalize_os
from gridflow.worker.transfer import FileCache, fetch_with_integrity

log = logging.getLogger(__name__)


@dataclass
class WorkerConfig:
    server_url: str
    client_name: str
    base_dir: Path
    group: Optional[str] = None
    os: str = "unix"
    time_scale: float = 1.0  # sleep hints are divided by this (virtual time)
    retry_interval_s: float = 30.0
    report_attempts: int = 5

    def __post_init__(self):
        self.base_dir = Path(self.base_dir).resolve()
        self.os = normalize_os(self.os)
        if not self.client_name:
            raise ValueError("client name required")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")


class Worker:
    def __init__(self, config: WorkerConfig, sleep: Optional[Callable[[float], None]] = None):
        self.config = config
        config.base_dir.mkdir(parents=True, exist_ok=True)
        probe = config.base_dir / ".writable"
        probe.write_text("")  # fail fast on an unwritable base dir
        probe.unlink()
        self.api = EngineClient(config.server_url)
        self.cache = FileCache(config.base_dir / ".cache")
        self.registry = JobRegistry(self.api)
        self._stop = threading.Event()
        self.sleep = sleep or self._stop.wait
        self.tasks_done = 0

    def stop(self):
        self._stop.set()

    # -- task execution ---------------------------------------------------

    def _work_dir(self, client_dir: str) -> Path:
        check_client_dir(client_dir)
        path = (self.config.base_dir / client_dir).resolve()
        if path != self.config.base_dir and self.config.base_dir not in path.parents:
            raise JobError(f"{client_dir!r} escapes the base directory", IO_ERROR)
        return path

    def _fetch(self, meta, dest_dir):
        return fetch_with_integrity(self.api, meta, dest_dir, self.cache)

    def _run_job(self, func, ctx: JobContext, params) -> int:
        result: dict = {}

        def target():
            try:
                result["code"] = func(ctx, params) or OK
            except JobError as exc:
                result["code"], result["error"] = exc.code, exc
            except (requests.RequestException, EngineHTTPError) as exc:
                result["code"], result["error"] = NETWORK_ERROR, exc
            except OSError as exc:
                result["code"], result["error"] = IO_ERROR, exc
            except Exception as exc:  # a broken job must not take the client down
                log.exception("job %s crashed", ctx.job_type)
                result["code"], result["error"] = JOB_FAILED, exc

        if ctx.timeout_s and not getattr(func, "supervises_timeout", False):
            t = threading.Thread(target=target, daemon=True, name=f"job-{ctx.job_type}")
            t.start()
            t.join(ctx.timeout_s)
            if t.is_alive():
                result = {"code": TIMEOUT, "error": f"timed out after {ctx.timeout_s} s"}
        else:
            target()
        if "error" in result:
            with open(ctx.log_path, "a") as fh:
                fh.write(f"{ctx.job_type} failed ({result['code']}): {result['error']}\n")
        return result["code"]

    def execute_task(self, envelope: TaskEnvelope) -> tuple[int, float]:
        """Run all jobs in order, stopping at the first failure."""
        start = time.monotonic()
        try:
            work_dir = self._work_dir(envelope.client_dir)
            work_dir.mkdir(parents=True, exist_ok=True)
        except (JobError, OSError, ValueError) as exc:
            log.error("task %s: %s", envelope.task_id, exc)
            return IO_ERROR, time.monotonic() - start
        aliases_cache: dict = {}
        for job in sorted(envelope.jobs, key=lambda j: j.job_no):
            ctx = JobContext(
                work_dir=work_dir,
                client_name=self.config.client_name,
                api=self.api,
                os=self.config.os,
                job_type=job.job_type,
                job_no=job.job_no,
                timeout_s=job.timeout_s,
                base_dir=self.config.base_dir,
                fetch=self._fetch,
            )
            if aliases_cache:
                ctx._aliases = aliases_cache
            try:
                func = self.registry.lookup_job(job.job_type)
            except (requests.RequestException, EngineHTTPError) as exc:
                log.error("job lookup for %s failed: %s", job.job_type, exc)
                return NETWORK_ERROR, time.monotonic() - start
            if func is None:
                log.error("unknown job type %s", job.job_type)
                return UNKNOWN_JOB, time.monotonic() - start
            code = self._run_job(func, ctx, dict(job.parameters))
            if ctx._aliases is not None:
                aliases_cache = ctx._aliases
            if code != OK:
                log.warning("task %s job %d (%s) failed with %d", envelope.task_id, job.job_no, job.job_type, code)
                return code, time.monotonic() - start
        return OK, time.monotonic() - start

    # -- polling ----------------------------------------------------------

    def _report(self, task_id: int, code: int, runtime: float) -> bool:
        for attempt in range(self.config.report_attempts):
            load, disk = report_metrics(self.config.base_dir)
            try:
                self.api.task_completed(self.config.client_name, task_id, code, runtime, load, disk)
                return True
            except EngineHTTPError as exc:
                # 409/404: the server no longer holds this task for us
                log.warning("completion of task %s rejected: %s", task_id, exc)
                return False
            except requests.RequestException as exc:
                log.warning("reporting task %s failed (%s), retrying", task_id, exc)
                self.sleep(self.config.retry_interval_s / self.config.time_scale)
                if self._stop.is_set():
                    break
        return False

    def poll_once(self) -> float:
        """One request cycle; returns how long to sleep before the next one."""
        cfg = self.config
        load, disk = report_metrics(cfg.base_dir)
        try:
            poll = self.api.poll(cfg.client_name, load, disk, cfg.group, cfg.os)
        except (requests.RequestException, EngineHTTPError) as exc:
            log.warning("task request failed: %s", exc)
            return cfg.retry_interval_s / cfg.time_scale
        if poll.envelope is None:
            return (poll.sleep_hint or 0.0) / cfg.time_scale
        envelope = poll.envelope
        log.info("task %s: %d jobs in %s", envelope.task_id, len(envelope.jobs), envelope.client_dir)
        code, runtime = self.execute_task(envelope)
        self._report(envelope.task_id, code, runtime)
        self.tasks_done += 1
        if envelope.erase_on_exit:
            try:
                shutil.rmtree(self._work_dir(envelope.client_dir), ignore_errors=True)
            except (JobError, ValueError):
                pass
        return 0.0

    def poll_loop(self, max_cycles: Optional[int] = None):
        cycles = 0
        while not self._stop.is_set():
            delay = self.poll_once()
            cycles += 1
            if max_cycles is not None and cycles >= max_cycles:
                break
            if delay > 0:
                self.sleep(delay)
