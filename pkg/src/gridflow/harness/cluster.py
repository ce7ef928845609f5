"""A local cluster: one engine process and K worker processes in a temp dir."""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import psutil
import requests

from gridflow.client import EngineClient, EngineHTTPError

log = logging.getLogger(__name__)


class ClusterError(RuntimeError):
    pass


class FaultAction(str, Enum):
    KILL_WORKER = "kill_worker"
    PAUSE_POLLING = "pause_polling"
    RESUME = "resume"
    CORRUPT_FILE = "corrupt_file"


@dataclass(frozen=True)
class Fault:
    """``at`` is ``start``, ``mid_task`` (target holds an active task) or ``delay:<s>``."""

    action: FaultAction
    target: str  # worker name, or repository path for corrupt_file
    at: str = "start"

    def __post_init__(self):
        object.__setattr__(self, "action", FaultAction(self.action))
        if not (self.at in ("start", "mid_task") or self.at.startswith("delay:")):
            raise ClusterError(f"unknown fault trigger {self.at!r}")


@dataclass
class ClusterSpec:
    worker_count: int = 4
    groups: Optional[Sequence[Sequence[str]]] = None  # per worker; default all in "cluster"
    names: Optional[Sequence[str]] = None
    port: Optional[int] = None  # None picks a free port
    virtual_time: bool = True
    time_scale: float = 1000.0  # virtual seconds per real second
    sleep_min: float = 60.0
    sleep_max: float = 300.0
    max_retries: int = 1
    seed: int = 0
    fault_plan: Sequence[Fault] = ()
    startup_timeout_s: float = 10.0

    def __post_init__(self):
        if self.worker_count < 0:
            raise ClusterError("worker_count must be >= 0")
        if self.names is None:
            self.names = [f"node-{i + 1:02d}" for i in range(self.worker_count)]
        self.names = list(self.names)
        if len(self.names) != self.worker_count:
            raise ClusterError(f"{len(self.names)} names for {self.worker_count} workers")
        dupes = sorted({n for n in self.names if self.names.count(n) > 1})
        if dupes:
            raise ClusterError(f"duplicate worker names: {dupes}")
        if self.groups is None:
            self.groups = [("cluster",)] * self.worker_count
        self.groups = [tuple(g) for g in self.groups]
        if len(self.groups) != self.worker_count:
            raise ClusterError(f"{len(self.groups)} group lists for {self.worker_count} workers")
        for fault in self.fault_plan:
            if fault.action != FaultAction.CORRUPT_FILE and fault.target not in self.names:
                raise ClusterError(f"fault {fault.action.value} targets unknown worker {fault.target!r}")

    @property
    def scale(self) -> float:
        return self.time_scale if self.virtual_time else 1.0


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def _python() -> list[str]:
    return [sys.executable, "-m", "gridflow"]


class Cluster:
    """Handle on running processes.  Use :func:`spawn_cluster` to create one."""

    def __init__(self, spec: ClusterSpec, root: Optional[Path] = None):
        self.spec = spec
        self._owns_root = root is None
        self.root = Path(root) if root else Path(tempfile.mkdtemp(prefix="gridflow-cluster-"))
        self.root.mkdir(parents=True, exist_ok=True)
        self.repository = self.root / "repository"
        self.logs = self.root / "logs"
        self.logs.mkdir(exist_ok=True)
        self.port = spec.port or free_port()
        self.url = f"http://127.0.0.1:{self.port}"
        self.api = EngineClient(self.url, timeout=30)
        self.server: Optional[subprocess.Popen] = None
        self.workers: dict[str, subprocess.Popen] = {}
        self.paused: set[str] = set()
        self.incarnations: dict[str, int] = {}
        self.fault_log: list[dict] = []
        self._fault_thread: Optional[threading.Thread] = None
        self._stopping = threading.Event()

    # -- lifecycle --------------------------------------------------------

    def start(self) -> "Cluster":
        try:
            self._start_server()
            for name in self.spec.names:
                self.spawn_worker(name)
            self.wait_registered(self.spec.names, self.spec.startup_timeout_s)
        except Exception as exc:
            diag = self.diagnostics()
            self.stop()
            raise ClusterError(f"cluster startup failed: {exc}\n{diag}") from exc
        if self.spec.fault_plan:
            self._fault_thread = threading.Thread(target=self._run_fault_plan, daemon=True)
            self._fault_thread.start()
        return self

    def _start_server(self):
        cfg = self.root / "server.conf"
        cfg.write_text(
            f"port = {self.port}\nhost = 127.0.0.1\nrepository = {self.repository}\n"
            f"store = {self.root / 'engine.db'}\nsleep_min = {self.spec.sleep_min}\n"
            f"sleep_max = {self.spec.sleep_max}\nmax_retries = {self.spec.max_retries}\n"
            f"seed = {self.spec.seed}\n"
        )
        out = open(self.logs / "server.log", "ab")
        self.server = subprocess.Popen([*_python(), "server", "--config", str(cfg)],
                                       stdout=out, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL)
        out.close()
        deadline = time.monotonic() + self.spec.startup_timeout_s
        while True:
            if self.server.poll() is not None:
                raise ClusterError(f"server exited with {self.server.returncode}")
            # a foreign process on the same port would answer too
            if self._server_listening():
                try:
                    self.api.status(log=False)
                    return
                except (requests.RequestException, EngineHTTPError):
                    pass
            if time.monotonic() > deadline:
                raise ClusterError("server did not answer in time")
            time.sleep(0.05)

    def _server_listening(self) -> bool:
        try:
            conns = psutil.Process(self.server.pid).net_connections(kind="tcp")
        except psutil.Error:
            return False
        return any(c.status == psutil.CONN_LISTEN and c.laddr.port == self.port for c in conns)

    def spawn_worker(self, name: str) -> subprocess.Popen:
        if name in self.workers and self.workers[name].poll() is None:
            raise ClusterError(f"worker {name} is already running")
        idx = self.spec.names.index(name)
        groups = self.spec.groups[idx]
        n = self.incarnations.get(name, 0) + 1
        self.incarnations[name] = n
        argv = [
            *_python(), "--log-level", "INFO", "worker",
            "--server", self.url,
            "--name", name,
            "--dir", str(self.root / "workers" / name),
            "--time-scale", repr(self.spec.scale),
            "--retry-interval", "30",
        ]
        if groups:
            argv += ["--group", groups[0]]
        out = open(self.logs / f"{name}.log", "ab")
        out.write(f"=== incarnation {n} ===\n".encode())
        out.flush()
        proc = subprocess.Popen(argv, stdout=out, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL)
        out.close()
        self.workers[name] = proc
        self.paused.discard(name)
        if len(groups) > 1:
            # the CLI takes one group; the rest are attached through the API
            self.api.configure_client(name, Groups=list(groups))
        return proc

    def wait_registered(self, names: Sequence[str], timeout: float = 10.0):
        deadline = time.monotonic() + timeout
        while True:
            registered = {c["name"] for c in self.api.status()["clients"]}
            missing = [n for n in names if n not in registered]
            if not missing:
                return
            for n in missing:
                proc = self.workers.get(n)
                if proc is not None and proc.poll() is not None:
                    raise ClusterError(f"worker {n} exited with {proc.returncode}")
            if time.monotonic() > deadline:
                raise ClusterError(f"workers not registered after {timeout} s: {missing}")
            time.sleep(0.05)

    def stop(self):
        self._stopping.set()
        for name in list(self.paused):
            self._signal(name, signal.SIGCONT)
        procs = list(self.workers.values()) + ([self.server] if self.server else [])
        for p in procs:
            if p.poll() is None:
                p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        self.api.close()
        if self._owns_root:
            shutil.rmtree(self.root, ignore_errors=True)

    def __enter__(self) -> "Cluster":
        return self

    def __exit__(self, *exc):
        self.stop()

    # -- faults -----------------------------------------------------------

    def _signal(self, name: str, sig: int):
        proc = self.workers.get(name)
        if proc is not None and proc.poll() is None:
            os.kill(proc.pid, sig)

    def _require_worker(self, name: str) -> subprocess.Popen:
        if name not in self.spec.names:
            raise ClusterError(f"unknown worker {name!r}")
        return self.workers[name]

    def active_task(self, name: str) -> Optional[int]:
        for t in self.api.status(log=False)["tasks"]:
            if t["status"] == "active" and t["client"] == name and not t["is_monitor"]:
                return t["task_id"]
        return None

    def inject_fault(self, action: FaultAction | str, target: str) -> dict:
        action = FaultAction(action)
        ack = {"action": action.value, "target": target, "time": time.time()}
        if action == FaultAction.CORRUPT_FILE:
            path = (self.repository / target).resolve()
            if not path.is_file():
                raise ClusterError(f"no repository file {target!r}")
            data = bytearray(path.read_bytes())
            if not data:
                raise ClusterError(f"cannot corrupt empty file {target!r}")
            data[len(data) // 2] ^= 0xFF  # same length, different digest
            path.write_bytes(bytes(data))
        else:
            proc = self._require_worker(target)
            if action == FaultAction.KILL_WORKER:
                ack["active_task"] = self.active_task(target)
                if target in self.paused:
                    self._signal(target, signal.SIGCONT)
                proc.kill()
                proc.wait()
                self.paused.discard(target)
            elif action == FaultAction.PAUSE_POLLING:
                self._signal(target, signal.SIGSTOP)
                self.paused.add(target)
            elif action == FaultAction.RESUME:
                self._signal(target, signal.SIGCONT)
                self.paused.discard(target)
        self.fault_log.append(ack)
        log.info("fault injected: %s", ack)
        return ack

    def restart_worker(self, name: str) -> subprocess.Popen:
        proc = self._require_worker(name)
        if proc.poll() is None:
            proc.kill()
            proc.wait()
        return self.spawn_worker(name)

    def _run_fault_plan(self):
        for fault in self.spec.fault_plan:
            if fault.at.startswith("delay:"):
                if self._stopping.wait(float(fault.at.split(":", 1)[1])):
                    return
            elif fault.at == "mid_task":
                while self.active_task(fault.target) is None:
                    if self._stopping.wait(0.01):
                        return
            if self._stopping.is_set():
                return
            try:
                self.inject_fault(fault.action, fault.target)
            except Exception as exc:  # keep the plan thread alive for the report
                self.fault_log.append({"action": fault.action.value, "target": fault.target, "error": str(exc)})

    def wait_faults(self, timeout: float = 60.0) -> list[dict]:
        if self._fault_thread is not None:
            self._fault_thread.join(timeout)
        return self.fault_log

    # -- inspection -------------------------------------------------------

    def status(self) -> dict:
        return self.api.status()

    def worker_logs(self, tail: int = 40) -> dict[str, str]:
        out = {}
        for p in sorted(self.logs.glob("*.log")):
            lines = p.read_text(errors="replace").splitlines()
            out[p.stem] = "\n".join(lines[-tail:])
        return out

    def diagnostics(self) -> str:
        parts = [f"--- {name} ---\n{text}" for name, text in self.worker_logs().items()]
        return "\n".join(parts)

    def repository_snapshot(self, exclude: Sequence[str] = ()) -> dict[str, str]:
        """Relative path -> md5 for every file in the repository."""
        snap = {}
        for p in sorted(self.repository.rglob("*")):
            if p.is_file():
                rel = p.relative_to(self.repository).as_posix()
                if any(rel.startswith(e) for e in exclude):
                    continue
                snap[rel] = hashlib.md5(p.read_bytes()).hexdigest()
        return snap


def spawn_cluster(spec: ClusterSpec, root: Optional[Path] = None) -> Cluster:
    return Cluster(spec, root).start()
