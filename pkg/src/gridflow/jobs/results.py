"""Jobs that move parsed results into engine tables and report on them."""
from __future__ import annotations

import csv
import io

from gridflow.client import EngineHTTPError
from gridflow.jobs.base import IO_ERROR, NETWORK_ERROR, PARSE_ERROR, JobContext, JobError, job, param
from gridflow.jobs.surrogate import MODES, read_freq_file


def read_value_log(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition("=")
        if sep:
            out[key.strip()] = float(value)
    return out


@job("JobInsertResults")
def job_insert_results(ctx: JobContext, params):
    table = param(params, "Tablename")
    sim_id = int(param(params, "SimID"))
    data = ctx.path(param(params, "Datafile"))
    try:
        freqs = read_freq_file(data.read_text())
    except OSError as exc:
        raise JobError(f"cannot read {data.name}: {exc}", IO_ERROR) from exc
    except ValueError as exc:
        raise JobError(f"bad frequency file: {exc}", PARSE_ERROR) from exc
    if len(freqs) != len(MODES):
        raise JobError(f"expected {len(MODES)} frequencies, got {len(freqs)}", PARSE_ERROR)
    row = {}
    if params.get("Logfile"):
        try:
            row.update(read_value_log(ctx.path(params["Logfile"]).read_text()))
        except OSError as exc:
            raise JobError(f"cannot read value log: {exc}", IO_ERROR) from exc
    row.update({f"f{m}": f for m, f in zip(MODES, freqs)})
    try:
        ctx.require_api().post_result(table, sim_id, row)
    except EngineHTTPError as exc:
        raise JobError(f"result rejected: {exc}", NETWORK_ERROR)
    return 0


def results_csv(rows: list[dict]) -> str:
    columns = ["SimID"]
    for row in rows:
        for key in sorted(row):
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


@job("CreateReport")
def create_report(ctx: JobContext, params):
    """Write all rows of a result table as CSV and upload it."""
    api = ctx.require_api()
    table = param(params, "Tablename")
    name = param(params, "File", default=f"{table}.csv")
    server_dir = param(params, "ServerDir", "Dir", default="reports")
    rows = api.results(table)
    wanted = params.get("SimIDs")
    if wanted:
        keep = {int(s) for s in wanted.split()}
        rows = [r for r in rows if r["SimID"] in keep]
    out = ctx.path(name)
    out.write_text(results_csv(rows))
    api.upload(server_dir, name, out)
    return 0
