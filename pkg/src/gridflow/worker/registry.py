"""Job lookup: built-in registry first, then definitions hosted by the server.

A hosted definition lives at ``jobs/<JobType>.jobdef`` in the server
repository::

    # echo a message
    param Message VARCHAR
    param Count INTEGER
    script unix:
    echo {Message} {Count}
    script windows:
    echo {Message} {Count}

``{name}`` slots must name declared parameters; literal braces are doubled.
The script body goes through alias substitution before it runs.
"""
from __future__ import annotations

import logging
import string
import threading
from dataclasses import dataclass
from typing import Optional

from gridflow import jobs  # noqa: F401  populates the registry
from gridflow.client import EngineClient, EngineHTTPError
from gridflow.jobs.base import PARSE_ERROR, REGISTRY, JobContext, JobError, JobFunc
from gridflow.model import IDENTIFIER, ColumnType
from gridflow.worker.scripts import normalize_os, resolve_aliases, run_script_with_timeout

log = logging.getLogger(__name__)

JOBDEF_DIR = "jobs"


class JobDefinitionError(ValueError):
    pass


@dataclass(frozen=True)
class JobDefinition:
    name: str
    params: dict[str, ColumnType]
    scripts: dict[str, str]  # os -> template

    @classmethod
    def parse(cls, name: str, text: str) -> "JobDefinition":
        params: dict[str, ColumnType] = {}
        scripts: dict[str, list[str]] = {}
        current: Optional[list[str]] = None
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.strip()
            head = stripped.split()
            if head and head[0] == "script" and stripped.endswith(":"):
                os_name = normalize_os(stripped[len("script"):-1].strip())
                current = scripts.setdefault(os_name, [])
                continue
            if current is not None:
                current.append(line)
                continue
            if not stripped or stripped.startswith("#"):
                continue
            if head[0] == "param" and len(head) == 3:
                pname, ptype = head[1], head[2]
                if not IDENTIFIER.match(pname):
                    raise JobDefinitionError(f"{name}:{lineno}: bad parameter name {pname!r}")
                try:
                    params[pname] = ColumnType(ptype)
                except ValueError:
                    raise JobDefinitionError(f"{name}:{lineno}: unknown type {ptype!r}") from None
                continue
            raise JobDefinitionError(f"{name}:{lineno}: cannot parse {stripped!r}")
        if not scripts:
            raise JobDefinitionError(f"{name}: no script block")
        templates = {k: "\n".join(v).strip("\n") + "\n" for k, v in scripts.items()}
        for os_name, template in templates.items():
            try:
                slots = {f for _, f, _, _ in string.Formatter().parse(template) if f is not None}
            except ValueError as exc:
                raise JobDefinitionError(f"{name} ({os_name}): {exc}") from None
            undefined = slots - set(params)
            if undefined:
                raise JobDefinitionError(f"{name} ({os_name}): undefined slots {sorted(undefined)}")
        return cls(name, params, templates)

    def render(self, os_name: str, values: dict[str, str]) -> str:
        os_name = normalize_os(os_name)
        template = self.scripts.get(os_name)
        if template is None:
            raise JobError(f"{self.name} has no script for {os_name}", PARSE_ERROR)
        typed = {}
        for pname, ptype in self.params.items():
            if pname not in values:
                raise JobError(f"{self.name}: missing parameter {pname}", PARSE_ERROR)
            try:
                typed[pname] = ptype.coerce(values[pname])
            except ValueError:
                raise JobError(f"{self.name}: {pname}={values[pname]!r} is not {ptype.value}", PARSE_ERROR)
        return template.format(**typed)

    def as_job(self) -> JobFunc:
        def run(ctx: JobContext, params):
            text = resolve_aliases(self.render(ctx.os, dict(params)), ctx.aliases())
            outcome = run_script_with_timeout(
                text,
                ctx.work_dir,
                ctx.timeout_s,
                ctx.os,
                name=f"script_{self.name}_{ctx.job_no}",
                log_path=ctx.log_path,
            )
            return outcome.status_code

        run.__name__ = self.name
        run.definition = self
        run.supervises_timeout = True
        return run


class JobRegistry:
    """Resolves job types; remote definitions are cached once fetched."""

    def __init__(self, api: Optional[EngineClient] = None):
        self.api = api
        self._remote: dict[str, JobFunc] = {}
        self._lock = threading.Lock()

    def lookup_job(self, job_type: str) -> Optional[JobFunc]:
        if job_type in REGISTRY:
            return REGISTRY[job_type]
        with self._lock:
            if job_type in self._remote:
                return self._remote[job_type]
            if self.api is None or not IDENTIFIER.match(job_type):
                return None
            try:
                text = self.api.fetch_bytes(JOBDEF_DIR, f"{job_type}.jobdef").decode()
            except EngineHTTPError as exc:
                if exc.status == 404:
                    return None
                raise
            try:
                impl = JobDefinition.parse(job_type, text).as_job()
            except JobDefinitionError as exc:
                log.error("rejecting job definition: %s", exc)
                return None
            self._remote[job_type] = impl
            return impl

