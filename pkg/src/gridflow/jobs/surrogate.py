"""Analytic plate model standing in for the finite-element eigenfrequency run.

The three lowest elastic modes (4, 5, 6; modes 1-3 are rigid-body motions at
0 Hz) respond linearly to the three hole radii::

    f(r) = f_star + M (r - r_star)

with every entry of ``M`` negative, so shrinking any hole raises all
frequencies.  ``r_star`` reproduces ``f_star`` exactly.
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Sequence

from gridflow.jobs.base import IO_ERROR, JOB_FAILED, PARSE_ERROR, JobContext, JobError, job, param

R_STAR = (3.521, 3.755, 5.937)  # mm
F_STAR = (28.0, 30.0, 33.0)  # kHz
SENSITIVITY = (
    (-2.0, -0.5, -0.3),
    (-0.4, -2.2, -0.6),
    (-0.2, -0.3, -2.5),
)  # kHz/mm
R_BOUNDS = (1.0, 7.0)
MODES = (4, 5, 6)


@dataclass(frozen=True)
class SurrogateModel:
    r_star: tuple[float, float, float] = R_STAR
    f_star: tuple[float, float, float] = F_STAR
    M: tuple[tuple[float, ...], ...] = SENSITIVITY

    def frequencies(self, r: Sequence[float]) -> tuple[float, float, float]:
        d = [ri - si for ri, si in zip(r, self.r_star)]
        return tuple(
            fk + sum(mkj * dj for mkj, dj in zip(row, d)) for fk, row in zip(self.f_star, self.M)
        )

    def check_radii(self, r: Sequence[float]):
        lo, hi = R_BOUNDS
        if len(r) != 3:
            raise JobError(f"expected 3 radii, got {len(r)}", PARSE_ERROR)
        for i, ri in enumerate(r, start=1):
            if not lo <= ri <= hi:
                raise JobError(f"radius r{i}={ri} mm outside [{lo}, {hi}]", JOB_FAILED)


MODEL = SurrogateModel()

_CYL = re.compile(r"^\s*CYL4\s*,([^,]*),([^,]*),([^,\s]+)", re.I | re.M)
_MODE = re.compile(r"^\s*MODE\s+(\d+)\s+FREQ\s*=\s*(\S+)\s+KHZ\s*$", re.M)
END_MARK = "*** END OF SOLUTION ***"


def read_radii(deck: str) -> list[float]:
    radii = []
    for m in _CYL.finditer(deck):
        try:
            radii.append(float(m.group(3)))
        except ValueError:
            raise JobError(f"bad radius {m.group(3)!r}", PARSE_ERROR) from None
    return radii


def render_output(r: Sequence[float], f: Sequence[float]) -> str:
    lines = [
        " *** SURROGATE MODAL ANALYSIS ***",
        " PLATE 60 X 60 MM, THREE HOLES",
        " HOLE RADII (MM) = " + "  ".join(repr(x) for x in r),
        " ELEMENT TYPE 42, 1200 ELEMENTS, 1281 NODES",
        " CONVERGENCE TOLERANCE = 1.0E-08",
        "",
        " ***** INDEX OF DATA SETS ON RESULTS FILE *****",
    ]
    for mode in (1, 2, 3):
        lines.append(f"  MODE {mode} FREQ = 0.0 KHZ")
    for mode, fk in zip(MODES, f):
        lines.append(f"  MODE {mode} FREQ = {fk!r} KHZ")
    lines += ["", " SOLUTION TIME 0.00 S", END_MARK, ""]
    return "\n".join(lines)


def parse_output(text: str) -> dict[int, float]:
    if END_MARK not in text:
        raise JobError("solver output is incomplete", PARSE_ERROR)
    freqs = {int(m.group(1)): float(m.group(2)) for m in _MODE.finditer(text)}
    missing = [m for m in MODES if m not in freqs]
    if missing:
        raise JobError(f"frequencies for modes {missing} not found", PARSE_ERROR)
    return {m: freqs[m] for m in MODES}


@job("JobSurrogateSim")
def job_surrogate_sim(ctx: JobContext, params):
    deck = ctx.path(param(params, "Input"))
    out = ctx.path(param(params, "Output", default="solve.out"))
    delay = float(params.get("Delay") or 0)
    try:
        radii = read_radii(deck.read_text())
    except OSError as exc:
        raise JobError(f"cannot read deck: {exc}", IO_ERROR) from exc
    MODEL.check_radii(radii)
    if delay > 0:
        time.sleep(delay)
    out.write_text(render_output(radii, MODEL.frequencies(radii)))
    return 0


def write_freq_file(path, freqs: Sequence[float]):
    # 12 decimals keep the end-to-end error far below 1e-9 kHz
    path.write_text("".join(f"{f:.12f}\n" for f in freqs))


def read_freq_file(text: str) -> list[float]:
    return [float(x) for x in text.split()]


@job("JobParseEigenfreq")
def job_parse_freq(ctx: JobContext, params):
    raw = ctx.path(param(params, "Input", default="solve.out"))
    freq_file = ctx.path(param(params, "Freqfile"))
    mode_file = ctx.path(param(params, "Modefile"))
    try:
        freqs = parse_output(raw.read_text())
    except OSError as exc:
        raise JobError(f"cannot read solver output: {exc}", PARSE_ERROR) from exc
    write_freq_file(freq_file, [freqs[m] for m in MODES])
    mode_file.write_text("".join(f"{m} mode{m} {freqs[m]!r}\n" for m in MODES))
    return 0
