"""Best-effort load and free-disk probes sent with every task request."""
from __future__ import annotations

import os
import shutil


def load_average() -> float:
    try:
        return os.getloadavg()[0]
    except (AttributeError, OSError):
        return 0.0


def disk_free_kb(path: os.PathLike) -> int:
    try:
        return shutil.disk_usage(path).free // 1024
    except OSError:
        return 0


def report_metrics(base_dir: os.PathLike) -> tuple[float, int]:
    return load_average(), disk_free_kb(base_dir)
