"""Parameter template substitution.

Placeholders are empty XML elements embedded in otherwise opaque text::

    CYL4,32e-3,32e-3,<TAG ID="r1" Min="1e-3" Max="7e-3" Len="5"/>

Each one is replaced by an explicit value from the job parameters, a uniform
draw in ``[Min, Max]`` or a normal draw around ``Mean`` with deviation ``Dev``.
``Len`` pads with spaces or truncates the decimal rendering to a fixed width.
"""
from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass
from typing import Mapping, Optional

from gridflow.jobs.base import IO_ERROR, PARSE_ERROR, JobContext, JobError, job, param

log = logging.getLogger(__name__)

_ATTR = re.compile(r'\s*([A-Za-z_][\w.-]*)\s*=\s*"([^"]*)"')
RESERVED = {"Input", "Output", "Logfile", "Seed", "Tag"}


class TemplateError(JobError):
    def __init__(self, message: str):
        super().__init__(message, PARSE_ERROR)


@dataclass(frozen=True)
class TagSpec:
    id: str
    min: Optional[float] = None
    max: Optional[float] = None
    mean: Optional[float] = None
    dev: Optional[float] = None
    len: Optional[int] = None

    def __post_init__(self):
        if (self.min is None) != (self.max is None):
            raise TemplateError(f"tag {self.id}: Min and Max come in pairs")
        if (self.mean is None) != (self.dev is None):
            raise TemplateError(f"tag {self.id}: Mean and Dev come in pairs")
        if self.min is not None and self.min > self.max:
            raise TemplateError(f"tag {self.id}: Min > Max")
        if self.dev is not None and self.dev <= 0:
            raise TemplateError(f"tag {self.id}: Dev must be positive")
        if self.len is not None and self.len <= 0:
            raise TemplateError(f"tag {self.id}: Len must be positive")

    def value(self, explicit: Mapping[str, float], rng: random.Random) -> float:
        if self.id in explicit:
            return float(explicit[self.id])
        if self.min is not None and self.mean is not None:
            raise TemplateError(f"tag {self.id}: both Min/Max and Mean/Dev given")
        if self.min is not None:
            return rng.uniform(self.min, self.max)
        if self.mean is not None:
            return rng.gauss(self.mean, self.dev)
        raise TemplateError(f"tag {self.id}: no value and no range")


def _position(text: str, offset: int) -> str:
    line = text.count("\n", 0, offset) + 1
    col = offset - (text.rfind("\n", 0, offset) + 1) + 1
    return f"line {line}, column {col}"


def parse_tags(text: str, tag: str = "TAG") -> list[tuple[int, int, TagSpec]]:
    """Locate every placeholder; returns (start, end, spec) in text order."""
    found = []
    opener = re.compile(r"<" + re.escape(tag) + r"(?![\w.-])")
    for m in opener.finditer(text):
        pos = m.end()
        attrs: dict[str, str] = {}
        while True:
            am = _ATTR.match(text, pos)
            if not am:
                break
            attrs[am.group(1)] = am.group(2)
            pos = am.end()
        close = re.compile(r"\s*/>").match(text, pos)
        if close is None:
            raise TemplateError(f"malformed <{tag}> at {_position(text, m.start())}")
        if "ID" not in attrs:
            raise TemplateError(f"<{tag}> without ID at {_position(text, m.start())}")

        def num(key, conv=float):
            try:
                return conv(attrs[key]) if key in attrs else None
            except ValueError:
                raise TemplateError(f"bad {key}={attrs[key]!r} at {_position(text, m.start())}") from None

        spec = TagSpec(attrs["ID"], num("Min"), num("Max"), num("Mean"), num("Dev"), num("Len", int))
        found.append((m.start(), close.end(), spec))
    return found


def render_fixed(value: float, width: Optional[int]) -> str:
    """Decimal rendering cut or space-padded to ``width`` characters."""
    text = repr(float(value))
    if width is None:
        return text
    if len(text) > width:
        cut = text[:width]
        if "." in text and "." not in cut or "e" in text and "e" not in cut:
            log.warning("truncating %s to %d characters loses magnitude: %r", text, width, cut)
        return cut
    return text.ljust(width)


def replace_tags(
    text: str,
    values: Mapping[str, float],
    rng: Optional[random.Random] = None,
    tag: str = "TAG",
) -> tuple[str, list[tuple[str, str]]]:
    """Substitute all placeholders; returns the new text and (id, token) pairs."""
    rng = rng or random.Random()
    out, used = [], []
    last = 0
    for start, end, spec in parse_tags(text, tag):
        token = render_fixed(spec.value(values, rng), spec.len)
        out.append(text[last:start])
        out.append(token)
        used.append((spec.id, token.strip()))
        last = end
    out.append(text[last:])
    return "".join(out), used


@job("JobReplaceTag")
def job_replace_tag(ctx: JobContext, params):
    src = ctx.path(param(params, "Input"))
    dst = ctx.path(param(params, "Output"))
    log_file = ctx.path(param(params, "Logfile", default="replace_tag.log"))
    seed = params.get("Seed")
    rng = random.Random(int(seed)) if seed not in (None, "") else random.Random()
    values = {}
    for name, raw in params.items():
        if name in RESERVED:
            continue
        try:
            values[name] = float(raw)
        except ValueError:
            raise JobError(f"parameter {name}={raw!r} is not numeric", PARSE_ERROR) from None
    try:
        template = src.read_text()
    except OSError as exc:
        raise JobError(f"cannot read template: {exc}", IO_ERROR) from exc
    text, used = replace_tags(template, values, rng, tag=params.get("Tag") or "TAG")
    dst.write_text(text)
    log_file.write_text("".join(f"{k}={v}\n" for k, v in used))
    return 0
