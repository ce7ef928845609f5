"""HTTP front end of the engine (FastAPI).

Endpoints::

    GET  /engine/Tasks?Client=&Load=&Disk=[&Group=&OS=]   200 XML | 204 + Sleep-Hint-Seconds
    POST /engine/TaskCompleted   form Client, TaskID, Status, Runtime, Load, Disk
    GET  /engine/Aliases?Client= text lines name=value
    POST /engine/Aliases         form Name, Value, Scope, Target
    GET  /files/<dir>/<file>     file bytes, X-File-MD5 / X-File-Length when indexed
    POST /engine/Upload          multipart ServerDir, File
    POST /engine/Submit          workflow XML -> task ids, one per line
    POST /engine/Results         JSON {"Table", "SimID", "Row"}
    GET  /engine/Results?Table=[&SimID=]
    GET  /engine/Status[?Tasks=1,2&Log=0]
    POST /engine/Admin           JSON admin rule
    POST /engine/Requeue         form TaskID
    GET  /engine/Billing?By=client|job_type[&Start=&End=]
"""
from __future__ import annotations

import logging
import random
import threading
import time
from email.utils import formatdate
from typing import Optional

from fastapi import FastAPI, File, Form, HTTPException, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse, PlainTextResponse, Response

from gridflow.model import AliasEntry, ModelError, Scope, decode_workflow, encode_task_envelope
from gridflow.server.config import ServerConfig
from gridflow.server.files import Forbidden, Repository
from gridflow.server.store import AdminRule, EngineStore, StoreError

log = logging.getLogger(__name__)


class Engine:
    """Store plus repository; the object behind every endpoint."""

    def __init__(self, store: EngineStore, repo: Repository):
        self.store = store
        self.repo = repo

    @classmethod
    def from_config(cls, cfg: ServerConfig) -> "Engine":
        store = EngineStore(
            cfg.store,
            sleep_bounds=(cfg.sleep_min, cfg.sleep_max),
            max_retries=cfg.max_retries,
            rng=random.Random(cfg.seed),
        )
        engine = cls(store, Repository(cfg.repository))
        engine.reindex()
        return engine

    def reindex(self):
        for meta in self.repo.scan():
            self.store.index_file(meta)


def _store_error(exc: StoreError) -> HTTPException:
    return HTTPException(status_code=exc.status, detail=str(exc))


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="gridflow engine")
    app.state.engine = engine
    store, repo = engine.store, engine.repo

    @app.exception_handler(StoreError)
    async def _on_store_error(request: Request, exc: StoreError):
        return PlainTextResponse(str(exc), status_code=exc.status)

    @app.exception_handler(ModelError)
    async def _on_model_error(request: Request, exc: ModelError):
        return PlainTextResponse(str(exc), status_code=400)

    @app.get("/engine/Tasks")
    def tasks(
        Client: str,
        Load: Optional[float] = None,
        Disk: Optional[int] = None,
        Group: Optional[str] = None,
        OS: str = "unix",
    ):
        if not Client.strip():
            raise HTTPException(400, "empty client name")
        groups = [g for g in (Group or "").split(",") if g]
        result = store.claim(Client, load=Load, disk=Disk, os=OS, groups=groups)
        if result.envelope is None:
            return Response(status_code=204, headers={"Sleep-Hint-Seconds": f"{result.sleep_hint:.3f}"})
        return Response(encode_task_envelope(result.envelope), media_type="application/xml")

    @app.post("/engine/TaskCompleted")
    def task_completed(
        Client: str = Form(...),
        TaskID: int = Form(...),
        Status: str = Form(...),
        Runtime: float = Form(0.0),
        Load: float = Form(0.0),
        Disk: int = Form(0),
    ):
        code = 0 if Status.strip().lower() == "ok" else int(Status)
        new_status = store.complete(Client, TaskID, code, Runtime, Load, Disk)
        return PlainTextResponse(new_status)

    @app.get("/engine/Aliases")
    def aliases(Client: str = ""):
        lines = "".join(f"{n}={v}\n" for n, v in store.aliases_for(Client))
        return PlainTextResponse(lines)

    @app.post("/engine/Aliases")
    def set_alias(
        Name: str = Form(...), Value: str = Form(...), Scope_: str = Form("global", alias="Scope"),
        Target: str = Form(""),
    ):
        store.set_alias(AliasEntry(Name, Value, Scope(Scope_), Target or None))
        return PlainTextResponse("ok")

    def _file_response(path: str, head: bool):
        server_dir, name = repo.split(path)
        try:
            target = repo.resolve(server_dir, name)
        except Forbidden:
            raise HTTPException(403, "path outside repository")
        if not name or not target.is_file():
            raise HTTPException(404, "no such file")
        headers = {}
        meta = store.file_meta(repo.normdir(server_dir), name)
        if meta is not None:
            if meta.md5:
                headers["X-File-MD5"] = meta.md5
            if meta.length is not None:
                headers["X-File-Length"] = str(meta.length)
            if meta.last_modified:
                headers["X-File-Modified"] = formatdate(meta.last_modified, usegmt=True)
        if head:
            headers["Content-Length"] = str(target.stat().st_size)
            return Response(status_code=200, headers=headers)
        return FileResponse(target, headers=headers)

    @app.get("/files/{path:path}")
    def download(path: str):
        return _file_response(path, head=False)

    @app.head("/files/{path:path}")
    def download_head(path: str):
        return _file_response(path, head=True)

    @app.post("/engine/Upload")
    def upload(ServerDir: str = Form(""), File_: UploadFile = File(..., alias="File"),
               FileName: str = Form("")):
        name = FileName or File_.filename or ""
        try:
            meta = repo.write(ServerDir, name, File_.file)
        except Forbidden:
            raise HTTPException(403, "path outside repository")
        store.index_file(meta)
        return {
            "server_dir": meta.server_dir,
            "file_name": meta.file_name,
            "length": meta.length,
            "md5": meta.md5,
            "last_modified": meta.last_modified,
        }

    @app.post("/engine/Submit")
    async def submit(request: Request):
        body = await request.body()
        wf = decode_workflow(body)
        ids = store.submit(wf)
        return PlainTextResponse("".join(f"{i}\n" for i in ids))

    @app.post("/engine/Results")
    async def results_ingest(request: Request):
        data = await request.json()
        try:
            table, sim_id, row = data["Table"], int(data["SimID"]), dict(data["Row"])
        except (KeyError, TypeError, ValueError):
            raise HTTPException(400, "expected {Table, SimID, Row}")
        store.ingest_result(table, sim_id, row)
        return PlainTextResponse("ok")

    @app.get("/engine/Results")
    def results(Table: str, SimID: Optional[str] = None):
        ids = [int(s) for s in SimID.split(",") if s] if SimID else None
        return JSONResponse(store.results(Table, ids))

    @app.get("/engine/Status")
    def status(Tasks: Optional[str] = None, Log: int = 1):
        ids = [int(s) for s in Tasks.split(",") if s] if Tasks else None
        return JSONResponse(store.status(ids, include_log=bool(Log)))

    @app.post("/engine/Admin")
    async def admin(request: Request):
        data = await request.json()
        try:
            rule = AdminRule(**data)
        except TypeError as exc:
            raise HTTPException(400, str(exc))
        return JSONResponse({"affected": store.apply_admin_rule(rule)})

    @app.post("/engine/Requeue")
    def requeue(TaskID: int = Form(...)):
        store.requeue_failed(TaskID)
        return PlainTextResponse("ok")

    @app.post("/engine/Client")
    async def client_settings(request: Request):
        data = await request.json()
        name = data.pop("Client")
        groups = data.pop("Groups", [])
        store.ensure_client(name, os=data.pop("OS", "unix"))
        for g in groups:
            store.add_to_group(name, g)
        if data:
            store.set_client(name, **data)
        return JSONResponse(store.client(name))

    @app.get("/engine/Billing")
    def billing(By: str = "client", Start: Optional[float] = None, End: Optional[float] = None):
        rows = store.billing(By, Start, End)
        return PlainTextResponse("key,charged_time\n" + "".join(f"{k},{v!r}\n" for k, v in rows))

    return app


def serve(cfg: ServerConfig):
    import uvicorn

    engine = Engine.from_config(cfg)
    app = create_app(engine)
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning", access_log=False)


class ServerThread:
    """Run the app on a background thread; for tests and scripted studies."""

    def __init__(self, engine: Engine, host: str = "127.0.0.1", port: int = 0):
        import uvicorn

        self.engine = engine
        config = uvicorn.Config(create_app(engine), host=host, port=port, log_level="warning",
                                access_log=False, lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True, name="engine-http")
        self.host = host

    def start(self, timeout: float = 10.0) -> "ServerThread":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("engine HTTP server failed to start")
            time.sleep(0.01)
        return self

    @property
    def port(self) -> int:
        sock = self._server.servers[0].sockets[0]
        return sock.getsockname()[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self):
        self._server.should_exit = True
        self._thread.join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
