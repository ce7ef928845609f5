"""The three plate studies: DOE sampling, annealing, robustness sampling."""
from __future__ import annotations

import csv
import io
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from gridflow.client import EngineClient
from gridflow.jobs.cache import cached_call
from gridflow.jobs.surrogate import F_STAR, MODEL, R_BOUNDS, R_STAR, SENSITIVITY
from gridflow.submit.client import ensure_template, submit_and_wait
from gridflow.submit.workflow import RunSpec, StudyError, StudyLayout, build_workflow

Vector = tuple[float, float, float]
RESULT_FIELDS = ("SimID", "r1", "r2", "r3", "f4", "f5", "f6")


def rows_to_csv(rows: Sequence[dict], fields: Sequence[str] = RESULT_FIELDS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        values = [row.get(f, "") for f in fields]
        writer.writerow([repr(v) if isinstance(v, float) else v for v in values])
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({k: (int(v) if k in ("SimID", "eval") else float(v)) for k, v in rec.items()})
    return out


# -- DOE -------------------------------------------------------------------


def sample_uniform(n: int, bounds: tuple[float, float] = R_BOUNDS, seed: int = 0) -> list[Vector]:
    if n < 1:
        raise StudyError(f"need at least one run, got n={n}")
    lo, hi = bounds
    if not R_BOUNDS[0] <= lo < hi <= R_BOUNDS[1]:
        raise StudyError(f"bounds {bounds} not inside {R_BOUNDS}")
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(n, 3))
    return [tuple(float(x) for x in p) for p in pts]


def run_doe(
    api: EngineClient,
    n: Optional[int] = None,
    bounds: tuple[float, float] = R_BOUNDS,
    seed: int = 0,
    table: Optional[Sequence[Sequence[float]]] = None,
    layout: StudyLayout = StudyLayout(),
    first_sim_id: int = 1,
    batch_size: Optional[int] = None,
    timeout_s: float = 600.0,
) -> list[dict]:
    """One workflow branch per parameter set; returns rows ordered by SimID.

    Parameter sets are uniform draws in ``bounds`` or, if ``table`` is given,
    taken from it verbatim.
    """
    points = [tuple(map(float, p)) for p in table] if table is not None else sample_uniform(n or 0, bounds, seed)
    if not points:
        raise StudyError("empty design table")
    runs = [RunSpec(first_sim_id + i, p) for i, p in enumerate(points)]
    ensure_template(api)
    size = batch_size or len(runs)
    rows: list[dict] = []
    for start in range(0, len(runs), size):
        chunk = runs[start:start + size]
        wf = build_workflow(chunk, layout, batch=True)
        rows += submit_and_wait(api, wf, timeout_s, layout.table, [r.sim_id for r in chunk])
    return rows


# -- optimisation -----------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveSpec:
    f_star: Vector = F_STAR
    template: str = "models/plate_template.dat"
    table: str = "Optimisation"

    def value(self, f: Sequence[float]) -> float:
        return float(sum((fk - tk) ** 2 for fk, tk in zip(f, self.f_star)))


class LocalObjective:
    """o(r) straight from the surrogate, for tests and dry runs."""

    def __init__(self, spec: ObjectiveSpec = ObjectiveSpec()):
        self.spec = spec
        self.evals = 0

    def __call__(self, r: Sequence[float]) -> float:
        self.evals += 1
        return self.spec.value(MODEL.frequencies(r))


class EngineObjective:
    """o(r) via a full engine round trip: one submitted workflow per call."""

    def __init__(self, api: EngineClient, spec: ObjectiveSpec = ObjectiveSpec(),
                 layout: Optional[StudyLayout] = None, first_sim_id: int = 1, timeout_s: float = 120.0):
        self.api = api
        self.spec = spec
        server_dir, _, name = spec.template.rpartition("/")
        self.layout = layout or StudyLayout(table=spec.table, template_dir=server_dir, template=name)
        self.next_id = first_sim_id
        self.timeout_s = timeout_s
        self.evals = 0
        ensure_template(api, server_dir=self.layout.template_dir, name=self.layout.template)

    def __call__(self, r: Sequence[float]) -> float:
        run = RunSpec(self.next_id, tuple(float(x) for x in r))
        self.next_id += 1
        self.evals += 1
        (row,) = submit_and_wait(self.api, build_workflow([run], self.layout), self.timeout_s,
                                 self.layout.table, [run.sim_id])
        return self.spec.value((row["f4"], row["f5"], row["f6"]))


@dataclass(frozen=True)
class SAConfig:
    t0: float = 10.0  # kHz^2
    cooling: float = 0.5
    steps_per_temp: int = 10
    proposal_sigma: float = 0.3  # mm, initial; adapted per stage
    bounds: tuple[float, float] = R_BOUNDS
    max_evals: int = 400
    seed: int = 0
    r0: Optional[Vector] = None  # defaults to the centre of the box
    target_accept: float = 0.4
    min_sigma: float = 5e-4  # step size at which the search counts as converged
    f_tol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.cooling < 1:
            raise ValueError("cooling must lie in (0, 1)")
        if self.t0 <= 0 or self.proposal_sigma <= 0:
            raise ValueError("t0 and proposal_sigma must be positive")
        if self.steps_per_temp < 1 or self.max_evals < 1:
            raise ValueError("steps_per_temp and max_evals must be >= 1")
        if self.bounds[0] >= self.bounds[1]:
            raise ValueError(f"empty bounds {self.bounds}")


@dataclass
class SAResult:
    r_best: Vector
    o_best: float
    converged: bool
    on_boundary: bool
    evals: int
    trace: list[dict] = field(default_factory=list)

    def trace_csv(self) -> str:
        return rows_to_csv(self.trace, ("eval", "r1", "r2", "r3", "o", "o_best", "T", "accepted"))


def sa_optimize(objective: Callable[[Sequence[float]], float], cfg: SAConfig = SAConfig()) -> SAResult:
    """Metropolis search with geometric cooling and per-stage step adaptation.

    Each stage runs ``steps_per_temp`` proposals at a fixed temperature, then
    rescales the proposal width towards ``target_accept``, restarts from the
    best point seen and cools ``T <- cooling * T``.
    """
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.bounds
    x = np.clip(np.array(cfg.r0 if cfg.r0 is not None else [(lo + hi) / 2] * 3, dtype=float), lo, hi)
    trace: list[dict] = []

    def evaluate(r: np.ndarray) -> float:
        o = float(objective(tuple(float(v) for v in r)))
        if not math.isfinite(o) or o < 0:
            raise StudyError(f"objective returned {o} at {r}")
        return o

    fx = evaluate(x)
    best_x, best_o = x.copy(), fx
    trace.append(_trace_row(1, x, fx, best_o, cfg.t0, True))
    temp, sigma = cfg.t0, np.full(3, cfg.proposal_sigma)
    converged = best_o <= cfg.f_tol
    while len(trace) < cfg.max_evals and not converged:
        accepted = 0
        tried = 0
        for _ in range(cfg.steps_per_temp):
            if len(trace) >= cfg.max_evals:
                break
            y = np.clip(x + sigma * rng.standard_normal(3), lo, hi)
            fy = evaluate(y)
            tried += 1
            delta = fy - fx
            ok = delta <= 0 or rng.random() < math.exp(-delta / temp)
            if ok:
                x, fx = y, fy
                accepted += 1
            if fy < best_o:
                best_x, best_o = y.copy(), fy
            trace.append(_trace_row(len(trace) + 1, y, fy, best_o, temp, ok))
            if best_o <= cfg.f_tol:
                converged = True
                break
        rate = accepted / max(tried, 1)
        # widen on high acceptance, shrink on low; bounded factor per stage
        sigma = sigma * float(np.clip(math.exp(2.0 * (rate - cfg.target_accept)), 0.3, 2.0))
        sigma = np.minimum(sigma, hi - lo)
        x, fx = best_x.copy(), best_o
        temp *= cfg.cooling
        if sigma.max() < cfg.min_sigma:
            converged = True
    on_boundary = bool(np.any(np.isclose(best_x, lo, atol=1e-9)) or np.any(np.isclose(best_x, hi, atol=1e-9)))
    return SAResult(
        r_best=tuple(float(v) for v in best_x),
        o_best=best_o,
        converged=converged,
        on_boundary=on_boundary,
        evals=len(trace),
        trace=trace,
    )


def _trace_row(i: int, r, o: float, o_best: float, temp: float, accepted: bool) -> dict:
    return {"eval": i, "r1": float(r[0]), "r2": float(r[1]), "r3": float(r[2]), "o": o,
            "o_best": o_best, "T": temp, "accepted": int(accepted)}


# -- robustness ---------------------------------------------------------------


@dataclass
class RobustnessResult:
    samples: list[dict]
    summary: dict[str, dict[str, float]]

    def samples_csv(self) -> str:
        return rows_to_csv(self.samples, ("SimID", "r1", "r2", "r3", "f4", "f5", "f6"))

    def summary_csv(self) -> str:
        keys = ("mode", "mean", "std", "std_analytic", "q025", "q975")
        rows = [{"mode": m, **v} for m, v in self.summary.items()]
        return rows_to_csv(rows, keys)


def analytic_std(sigma: float) -> dict[str, float]:
    return {f"f{m}": sigma * math.sqrt(sum(x * x for x in row)) for m, row in zip((4, 5, 6), SENSITIVITY)}


def _evaluate_samples(inputs: Sequence[Path], out_dir: Path):
    pts = np.loadtxt(inputs[0], delimiter=",", ndmin=2)
    f = np.array(F_STAR) + (pts - np.array(R_STAR)) @ np.array(SENSITIVITY).T
    np.savetxt(out_dir / "freqs.csv", f, delimiter=",", fmt="%.17g")


def robustness_sample(
    r_center: Sequence[float] = R_STAR,
    sigma: float = 0.01,
    n: int = 2000,
    seed: int = 0,
    repository: Optional[Path] = None,
) -> RobustnessResult:
    """Draw ``n`` points from N(r_center, sigma^2 I) and evaluate the surrogate.

    Evaluation goes through :func:`cached_call`, so a repeated draw reuses the
    stored frequencies.
    """
    if sigma < 0:
        raise StudyError(f"sigma must be non-negative, got {sigma}")
    if n < 1:
        raise StudyError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    pts = np.asarray(r_center, dtype=float) + sigma * rng.standard_normal((n, 3))
    lo, hi = R_BOUNDS
    pts = np.clip(pts, lo, hi)
    owned = repository is None
    tmp = tempfile.TemporaryDirectory(prefix="robust-") if owned else None
    repo = Path(tmp.name) if owned else Path(repository)
    try:
        inp = repo / "inputs" / f"samples_{seed}_{n}.csv"
        inp.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(inp, pts, delimiter=",", fmt="%.17g")
        outputs = cached_call("surrogate_batch", [inp], _evaluate_samples, repo / "cache")
        freqs = np.loadtxt(outputs["freqs.csv"], delimiter=",", ndmin=2)
    finally:
        if tmp is not None:
            tmp.cleanup()
    samples = [
        {"SimID": i + 1, "r1": float(p[0]), "r2": float(p[1]), "r3": float(p[2]),
         "f4": float(f[0]), "f5": float(f[1]), "f6": float(f[2])}
        for i, (p, f) in enumerate(zip(pts, freqs))
    ]
    expected = analytic_std(sigma)
    summary = {}
    for k, name in enumerate(("f4", "f5", "f6")):
        col = freqs[:, k]
        summary[name] = {
            "mean": float(col.mean()),
            "std": float(col.std(ddof=1)) if n > 1 else 0.0,
            "std_analytic": expected[name],
            "q025": float(np.quantile(col, 0.025)),
            "q975": float(np.quantile(col, 0.975)),
        }
    return RobustnessResult(samples, summary)
