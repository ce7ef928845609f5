"""Script generation and supervised execution."""
from __future__ import annotations

import os
import re
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import psutil

from gridflow.jobs.base import SPAWN_ERROR, TIMEOUT

UNIX, WINDOWS = "unix", "windows"


@dataclass(frozen=True)
class JobOutcome:
    status_code: int
    wall_time_s: float
    log_path: Path


def normalize_os(name: str) -> str:
    name = (name or UNIX).lower()
    if name.startswith("win"):
        return WINDOWS
    return UNIX


def shell_header(os_name: str, working_dir: os.PathLike) -> str:
    """Interpreter line and change-directory preamble for one platform."""
    if normalize_os(os_name) == WINDOWS:
        return f'@echo off\r\ncd /d "{working_dir}"\r\n'
    shell = "/bin/bash" if os.path.exists("/bin/bash") else "/bin/sh"
    return f"#!{shell}\ncd '{working_dir}'\n"


def script_suffix(os_name: str) -> str:
    return ".bat" if normalize_os(os_name) == WINDOWS else ".sh"


def resolve_aliases(text: str, aliases: Mapping[str, str]) -> str:
    """Replace every alias name in one pass, longest names first.

    A single regex pass keeps substituted values from being rescanned, and
    longest-first alternation stops ANSYS from matching inside ANSYS_LICENSE.
    """
    if not aliases:
        return text
    names = sorted(aliases, key=lambda n: (-len(n), n))
    pattern = re.compile("|".join(re.escape(n) for n in names))
    return pattern.sub(lambda m: aliases[m.group(0)], text)


def kill_tree(proc: subprocess.Popen):
    try:
        parent = psutil.Process(proc.pid)
        victims = parent.children(recursive=True) + [parent]
    except psutil.NoSuchProcess:
        victims = []
    if hasattr(os, "killpg"):
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
    for p in victims:
        try:
            p.kill()
        except psutil.NoSuchProcess:
            pass
    psutil.wait_procs(victims, timeout=2)


def run_script_with_timeout(
    script_text: str,
    working_dir: os.PathLike,
    timeout_s: Optional[float] = None,
    os_name: str = UNIX,
    name: str = "script",
    log_path: Optional[os.PathLike] = None,
) -> JobOutcome:
    """Write header + ``script_text`` to ``working_dir`` and run it.

    stdout and stderr go to ``log_path``.  On timeout the whole process tree is
    killed and :data:`TIMEOUT` is returned.
    """
    working_dir = Path(working_dir).resolve()
    os_name = normalize_os(os_name)
    newline = "\r\n" if os_name == WINDOWS else "\n"
    script = working_dir / f"{name}{script_suffix(os_name)}"
    body = script_text.replace("\r\n", "\n").replace("\n", newline)
    script.write_text(shell_header(os_name, working_dir) + body, newline="")
    log_path = Path(log_path) if log_path else working_dir / f"{name}.log"

    if os_name == WINDOWS:
        argv = ["cmd", "/c", str(script)]
    else:
        script.chmod(0o755)
        argv = [shutil.which("bash") or "/bin/sh", str(script)]

    start = time.monotonic()
    with open(log_path, "wb") as log:
        try:
            proc = subprocess.Popen(
                argv,
                cwd=working_dir,
                stdout=log,
                stderr=subprocess.STDOUT,
                stdin=subprocess.DEVNULL,
                start_new_session=(sys.platform != "win32"),
            )
        except OSError as exc:
            log.write(f"spawn failed: {exc}\n".encode())
            return JobOutcome(SPAWN_ERROR, time.monotonic() - start, log_path)
        try:
            code = proc.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            kill_tree(proc)
            proc.wait()
            return JobOutcome(TIMEOUT, time.monotonic() - start, log_path)
    if code < 0:
        code = 128 - code  # killed by signal, shell convention
    return JobOutcome(code, time.monotonic() - start, log_path)
