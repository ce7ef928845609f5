"""Download and Upload, the two jobs every client understands."""
from __future__ import annotations

from gridflow.client import EngineHTTPError
from gridflow.jobs.base import IO_ERROR, NETWORK_ERROR, JobContext, JobError, job, param
from gridflow.model import FileMeta


@job("Download")
def download(ctx: JobContext, params):
    server_dir = param(params, "ServerDir", "Dir", default="")
    name = param(params, "File")
    length = params.get("Length")
    md5 = params.get("MD5Sum") or params.get("MD5") or None
    meta = FileMeta(server_dir, name, int(length) if length else None, md5)
    if ctx.fetch is None:
        raise JobError("no transfer service", NETWORK_ERROR)
    try:
        ctx.fetch(meta, ctx.work_dir)
    except EngineHTTPError as exc:
        raise JobError(f"download {server_dir}/{name}: {exc}", NETWORK_ERROR if exc.status >= 500 else IO_ERROR)
    return 0


@job("Upload")
def upload(ctx: JobContext, params):
    server_dir = param(params, "ServerDir", "Dir", default="")
    name = param(params, "File")
    path = ctx.path(name)
    if not path.is_file():
        raise JobError(f"nothing to upload: {name}", IO_ERROR)
    try:
        ctx.require_api().upload(server_dir, name, path)
    except EngineHTTPError as exc:
        raise JobError(f"upload {server_dir}/{name}: {exc}", NETWORK_ERROR)
    return 0
