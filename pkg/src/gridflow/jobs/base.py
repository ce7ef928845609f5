"""Job API: status codes, execution context and the built-in registry."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

from gridflow.client import EngineClient

log = logging.getLogger(__name__)

# integer status codes reported to TaskCompleted; 0 is success
OK = 0
JOB_FAILED = 1
PARSE_ERROR = 65
INTEGRITY_ERROR = 66
IO_ERROR = 74
NETWORK_ERROR = 75
TIMEOUT = 124
SPAWN_ERROR = 126
UNKNOWN_JOB = 127


class JobError(Exception):
    def __init__(self, message: str, code: int = JOB_FAILED):
        self.code = code
        super().__init__(message)


class IntegrityError(JobError):
    def __init__(self, message: str):
        super().__init__(message, INTEGRITY_ERROR)


@dataclass
class JobContext:
    work_dir: Path
    client_name: str
    api: Optional[EngineClient] = None
    os: str = "unix"
    job_type: str = ""
    job_no: int = 1
    timeout_s: Optional[float] = None
    base_dir: Optional[Path] = None
    fetch: Optional[Callable] = None  # fetch_with_integrity bound to the worker's cache
    _aliases: Optional[dict] = field(default=None, repr=False)

    @property
    def log_path(self) -> Path:
        return self.work_dir / f"{self.job_type}_{self.job_no}.log"

    def path(self, name: str) -> Path:
        """Resolve a file name inside the working directory."""
        p = (self.work_dir / name).resolve()
        root = self.work_dir.resolve()
        if p != root and root not in p.parents:
            raise JobError(f"{name!r} escapes the working directory", IO_ERROR)
        return p

    def aliases(self) -> dict[str, str]:
        if self._aliases is None:
            if self.api is None:
                self._aliases = {}
            else:
                try:
                    self._aliases = self.api.aliases(self.client_name)
                except Exception as exc:
                    raise JobError(f"alias lookup failed: {exc}", NETWORK_ERROR) from exc
        return self._aliases

    def require_api(self) -> EngineClient:
        if self.api is None:
            raise JobError("job needs a server connection", NETWORK_ERROR)
        return self.api


JobFunc = Callable[[JobContext, Mapping[str, str]], Optional[int]]

REGISTRY: dict[str, JobFunc] = {}


def job(name: str):
    def register(fn: JobFunc) -> JobFunc:
        REGISTRY[name] = fn
        return fn

    return register


def param(params: Mapping[str, str], *names: str, default: Optional[str] = None) -> str:
    """First present parameter among ``names`` (aliases such as ServerDir/Dir)."""
    for n in names:
        if n in params and params[n] != "":
            return params[n]
    if default is not None:
        return default
    raise JobError(f"missing parameter {names[0]}", PARSE_ERROR)
