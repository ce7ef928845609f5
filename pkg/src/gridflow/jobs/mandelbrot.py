"""Mandelbrot escape-time benchmark used to calibrate performance factors."""
from __future__ import annotations

import time

from gridflow.jobs.base import JobContext, job, param


def escape_count(cx: float, cy: float, max_iter: int) -> int:
    # z starts at c; iteration n computes z_n = z_{n-1}^2 + c
    x, y = cx, cy
    for n in range(1, max_iter + 1):
        x, y = x * x - y * y + cx, 2.0 * x * y + cy
        if x * x + y * y > 4.0:
            return n
    return max_iter


def mandelbrot(width: int, height: int, max_iter: int) -> tuple[float, int]:
    """Sweep [-2, 1] x [-1.5, 1.5]; returns (wall time, sum of iteration counts)."""
    if width <= 0 or height <= 0 or max_iter <= 0:
        raise ValueError("width, height and max_iter must be positive")
    start = time.perf_counter()
    total = 0
    for j in range(height):
        cy = -1.5 + 3.0 * j / (height - 1) if height > 1 else 0.0
        for i in range(width):
            cx = -2.0 + 3.0 * i / (width - 1) if width > 1 else -0.5
            total += escape_count(cx, cy, max_iter)
    return time.perf_counter() - start, total


@job("JobMandelbrot")
def job_mandelbrot(ctx: JobContext, params):
    runtime, checksum = mandelbrot(
        int(param(params, "Width", default="64")),
        int(param(params, "Height", default="64")),
        int(param(params, "MaxIter", default="100")),
    )
    out = params.get("Output")
    if out:
        ctx.path(out).write_text(f"runtime_s={runtime!r}\nchecksum={checksum}\n")
    return 0
