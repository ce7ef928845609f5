"""Transactional table store for the engine.

All mutations run inside :meth:`EngineStore.transaction`, which serialises
writers with a process lock on top of an SQLite ``BEGIN IMMEDIATE``.  That is
what makes a claim atomic: no task can be handed to two clients.
"""
from __future__ import annotations

import contextlib
import json
import logging
import random
import sqlite3
import threading
import time
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

from gridflow.model import (
    MONITOR_JOB,
    AliasEntry,
    ColumnType,
    EnvelopeJob,
    Event,
    FileMeta,
    IDENTIFIER,
    Scope,
    TaskEnvelope,
    TaskStatus,
    WorkflowDescription,
    advance_status,
    plan_workflow,
    render_value,
)

log = logging.getLogger(__name__)

TRANSFER_JOBS = ("Download", "Upload")

_SCHEMA = """
CREATE TABLE IF NOT EXISTS tasks (
    task_id INTEGER PRIMARY KEY,
    client TEXT,
    client_fixed INTEGER NOT NULL DEFAULT 0,
    client_group TEXT,
    depends_on_task INTEGER,
    depends_on_group_node INTEGER NOT NULL DEFAULT 0,
    task_group INTEGER,
    status TEXT NOT NULL,
    client_dir TEXT NOT NULL DEFAULT '.',
    erase_on_exit INTEGER NOT NULL DEFAULT 0,
    retries_used INTEGER NOT NULL DEFAULT 0,
    is_monitor INTEGER NOT NULL DEFAULT 0
);
CREATE INDEX IF NOT EXISTS ix_tasks_dep ON tasks(depends_on_task);
CREATE INDEX IF NOT EXISTS ix_tasks_client ON tasks(client);
CREATE INDEX IF NOT EXISTS ix_tasks_group ON tasks(client_group);
CREATE INDEX IF NOT EXISTS ix_tasks_status ON tasks(status);
CREATE INDEX IF NOT EXISTS ix_tasks_task_group ON tasks(task_group);
CREATE TABLE IF NOT EXISTS task_jobs (
    task_id INTEGER NOT NULL,
    job_no INTEGER NOT NULL,
    job_type TEXT NOT NULL,
    job_id INTEGER NOT NULL,
    PRIMARY KEY (task_id, job_no)
);
CREATE TABLE IF NOT EXISTS job_columns (
    job_type TEXT NOT NULL,
    name TEXT NOT NULL,
    type TEXT NOT NULL,
    ord INTEGER NOT NULL,
    PRIMARY KEY (job_type, name)
);
CREATE TABLE IF NOT EXISTS client_groups (
    client_group TEXT NOT NULL,
    client TEXT NOT NULL,
    PRIMARY KEY (client_group, client)
);
CREATE TABLE IF NOT EXISTS aliases (
    name TEXT NOT NULL,
    value TEXT NOT NULL,
    scope TEXT NOT NULL,
    target TEXT NOT NULL DEFAULT '',
    PRIMARY KEY (name, scope, target)
);
CREATE TABLE IF NOT EXISTS clients (
    name TEXT PRIMARY KEY,
    os TEXT NOT NULL DEFAULT 'unix',
    last_request REAL,
    sleep_min REAL NOT NULL,
    sleep_max REAL NOT NULL,
    saved_sleep_min REAL,
    saved_sleep_max REAL,
    load REAL NOT NULL DEFAULT 0,
    disk INTEGER NOT NULL DEFAULT 0,
    current_task INTEGER,
    performance_factor REAL NOT NULL DEFAULT 1.0,
    load_threshold REAL,
    on_hold INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS files (
    server_dir TEXT NOT NULL,
    file_name TEXT NOT NULL,
    length INTEGER,
    md5 TEXT,
    last_modified REAL,
    PRIMARY KEY (server_dir, file_name)
);
CREATE TABLE IF NOT EXISTS completions (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    task_id INTEGER NOT NULL,
    client TEXT NOT NULL,
    job_type TEXT NOT NULL,
    status_code INTEGER NOT NULL,
    runtime_s REAL NOT NULL,
    load REAL NOT NULL,
    disk INTEGER NOT NULL,
    ts REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS events (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    ts REAL NOT NULL,
    task_id INTEGER,
    client TEXT,
    kind TEXT NOT NULL,
    detail TEXT
);
CREATE TABLE IF NOT EXISTS result_columns (
    table_name TEXT NOT NULL,
    name TEXT NOT NULL,
    type TEXT NOT NULL,
    PRIMARY KEY (table_name, name)
);
CREATE TABLE IF NOT EXISTS results (
    table_name TEXT NOT NULL,
    sim_id INTEGER NOT NULL,
    row_json TEXT NOT NULL,
    PRIMARY KEY (table_name, sim_id)
);
"""

_SQL_TYPES = {ColumnType.VARCHAR: "TEXT", ColumnType.DOUBLE: "REAL", ColumnType.INTEGER: "INTEGER"}


class StoreError(Exception):
    status = 500


class NotFound(StoreError):
    status = 404


class Conflict(StoreError):
    status = 409


class BadRequest(StoreError):
    status = 400


class RuleError(StoreError):
    status = 400


@dataclass
class AdminRule:
    action: str  # suspend_group | resume_group | set_sleeptime | hold_high_load
    group: Optional[str] = None
    subset_group: Optional[str] = None
    clients: Sequence[str] = ()
    sleep_min: Optional[float] = None
    sleep_max: Optional[float] = None
    load_threshold: Optional[float] = None
    rule_id: Optional[str] = None


@dataclass
class ClaimResult:
    envelope: Optional[TaskEnvelope]
    sleep_hint: Optional[float] = None
    requeued: list[int] = field(default_factory=list)


def _job_table(job_type: str) -> str:
    if not IDENTIFIER.match(job_type):
        raise BadRequest(f"bad job type {job_type!r}")
    return f'"job_{job_type}"'


def _q(name: str) -> str:
    if not IDENTIFIER.match(name):
        raise BadRequest(f"bad identifier {name!r}")
    return f'"{name}"'


def _value_type(value) -> ColumnType:
    if isinstance(value, bool):
        raise BadRequest("boolean values are not supported")
    if isinstance(value, int):
        return ColumnType.INTEGER
    if isinstance(value, float):
        return ColumnType.DOUBLE
    if isinstance(value, str):
        return ColumnType.VARCHAR
    raise BadRequest(f"unsupported value {value!r}")


class EngineStore:
    def __init__(
        self,
        path: str = ":memory:",
        sleep_bounds: tuple[float, float] = (60, 300),
        max_retries: int = 1,
        rng: Optional[random.Random] = None,
        clock=time.time,
    ):
        self.path = path
        self.default_sleep = sleep_bounds
        self.max_retries = max_retries
        self.rng = rng or random.Random()
        self.clock = clock
        self._lock = threading.RLock()
        self._db = sqlite3.connect(path, check_same_thread=False, isolation_level=None, timeout=30)
        self._db.row_factory = sqlite3.Row
        if path != ":memory:":
            self._db.execute("PRAGMA journal_mode=WAL")
        self._db.executescript(_SCHEMA)
        self._depth = 0

    def close(self):
        self._db.close()

    @contextlib.contextmanager
    def transaction(self) -> Iterator[sqlite3.Connection]:
        with self._lock:
            if self._depth:
                self._depth += 1
                try:
                    yield self._db
                finally:
                    self._depth -= 1
                return
            for attempt in range(20):
                try:
                    self._db.execute("BEGIN IMMEDIATE")
                    break
                except sqlite3.OperationalError as exc:
                    if "locked" not in str(exc):
                        raise
                    time.sleep(0.01 * (attempt + 1))
            else:
                raise StoreError("store busy")
            self._depth = 1
            try:
                yield self._db
            except BaseException:
                self._db.execute("ROLLBACK")
                raise
            else:
                self._db.execute("COMMIT")
            finally:
                self._depth = 0

    def _event(self, db, kind: str, task_id=None, client=None, detail=None):
        db.execute(
            "INSERT INTO events (ts, task_id, client, kind, detail) VALUES (?, ?, ?, ?, ?)",
            (self.clock(), task_id, client, kind, detail),
        )

    # -- clients and groups ---------------------------------------------

    def ensure_client(
        self,
        name: str,
        os: str = "unix",
        groups: Sequence[str] = (),
        performance_factor: Optional[float] = None,
    ) -> bool:
        """Register ``name`` if unknown; returns True on first registration.

        Group memberships are only attached at registration so later admin
        renames are not undone by the next poll.
        """
        if not name:
            raise BadRequest("empty client name")
        with self.transaction() as db:
            row = db.execute("SELECT name FROM clients WHERE name = ?", (name,)).fetchone()
            if row is None:
                db.execute(
                    "INSERT INTO clients (name, os, sleep_min, sleep_max, performance_factor)"
                    " VALUES (?, ?, ?, ?, ?)",
                    (name, os, self.default_sleep[0], self.default_sleep[1], performance_factor or 1.0),
                )
                for g in groups:
                    if g:
                        db.execute(
                            "INSERT OR IGNORE INTO client_groups VALUES (?, ?)", (g, name)
                        )
                self._event(db, "register", client=name, detail=",".join(groups))
                return True
            if performance_factor is not None:
                db.execute(
                    "UPDATE clients SET performance_factor = ? WHERE name = ?",
                    (performance_factor, name),
                )
            return False

    def add_to_group(self, client: str, group: str):
        with self.transaction() as db:
            db.execute("INSERT OR IGNORE INTO client_groups VALUES (?, ?)", (group, client))

    def groups_of(self, client: str) -> set[str]:
        with self.transaction() as db:
            rows = db.execute("SELECT client_group FROM client_groups WHERE client = ?", (client,))
            return {r[0] for r in rows}

    def set_client(self, name: str, **fields):
        allowed = {
            "sleep_min", "sleep_max", "performance_factor", "load_threshold", "on_hold", "load", "os",
        }
        bad = set(fields) - allowed
        if bad:
            raise BadRequest(f"unknown client fields {sorted(bad)}")
        with self.transaction() as db:
            if db.execute("SELECT 1 FROM clients WHERE name = ?", (name,)).fetchone() is None:
                raise NotFound(f"unknown client {name}")
            for key, value in fields.items():
                db.execute(f"UPDATE clients SET {key} = ? WHERE name = ?", (value, name))

    def client(self, name: str) -> Optional[dict]:
        with self.transaction() as db:
            row = db.execute("SELECT * FROM clients WHERE name = ?", (name,)).fetchone()
            if row is None:
                return None
            out = dict(row)
            out["groups"] = sorted(
                r[0]
                for r in db.execute(
                    "SELECT client_group FROM client_groups WHERE client = ?", (name,)
                )
            )
            return out

    # -- aliases ----------------------------------------------------------

    def set_alias(self, entry: AliasEntry):
        target = entry.target or ""
        if entry.scope is not Scope.GLOBAL and not target:
            raise BadRequest("client/group aliases need a target")
        with self.transaction() as db:
            db.execute(
                "INSERT OR REPLACE INTO aliases (name, value, scope, target) VALUES (?, ?, ?, ?)",
                (entry.name, entry.value, entry.scope.value, target),
            )

    def aliases_for(self, client: str) -> list[tuple[str, str]]:
        """Resolve every alias name once, client scope over group over global."""
        rank = {Scope.CLIENT.value: 0, Scope.GROUP.value: 1, Scope.GLOBAL.value: 2}
        with self.transaction() as db:
            groups = {
                r[0]
                for r in db.execute(
                    "SELECT client_group FROM client_groups WHERE client = ?", (client,)
                )
            }
            best: dict[str, tuple[int, str, str]] = {}
            for row in db.execute("SELECT name, value, scope, target FROM aliases"):
                scope, target = row["scope"], row["target"]
                if scope == Scope.CLIENT.value and target != client:
                    continue
                if scope == Scope.GROUP.value and target not in groups:
                    continue
                # ties inside one scope (client in two groups) break on group name
                key = (rank[scope], target, row["value"])
                cur = best.get(row["name"])
                if cur is None or key < cur:
                    best[row["name"]] = key
        return sorted((name, v[2]) for name, v in best.items())

    # -- files ------------------------------------------------------------

    def index_file(self, meta: FileMeta):
        with self.transaction() as db:
            db.execute(
                "INSERT OR REPLACE INTO files VALUES (?, ?, ?, ?, ?)",
                (meta.server_dir, meta.file_name, meta.length, meta.md5, meta.last_modified),
            )

    def file_meta(self, server_dir: str, file_name: str) -> Optional[FileMeta]:
        with self.transaction() as db:
            row = db.execute(
                "SELECT * FROM files WHERE server_dir = ? AND file_name = ?", (server_dir, file_name)
            ).fetchone()
        if row is None:
            return None
        return FileMeta(row["server_dir"], row["file_name"], row["length"], row["md5"], row["last_modified"])

    # -- submission -------------------------------------------------------

    def _declare_columns(self, db, job_type: str, columns: dict[str, ColumnType]):
        table = _job_table(job_type)
        existing = {
            r["name"]: ColumnType(r["type"])
            for r in db.execute("SELECT name, type FROM job_columns WHERE job_type = ?", (job_type,))
        }
        if not existing and not db.execute(
            "SELECT 1 FROM sqlite_master WHERE type='table' AND name = ?", (f"job_{job_type}",)
        ).fetchone():
            db.execute(f"CREATE TABLE {table} (JobID INTEGER PRIMARY KEY AUTOINCREMENT, Timeout INTEGER)")
        order = len(existing)
        for name, ctype in columns.items():
            if name in existing:
                continue
            db.execute(f"ALTER TABLE {table} ADD COLUMN {_q(name)} {_SQL_TYPES[ctype]}")
            db.execute(
                "INSERT INTO job_columns VALUES (?, ?, ?, ?)", (job_type, name, ctype.value, order)
            )
            order += 1

    def submit(self, wf: WorkflowDescription, activate: bool = True) -> list[int]:
        """Insert a validated workflow; returns task ids in document order.

        Rows are written as passive and flipped to waiting in the last step, so
        no client can pick up half of a chain.
        """
        plan = plan_workflow(wf)
        declared: dict[str, dict[str, ColumnType]] = {}
        for planned in plan:
            if planned.spec is None:
                continue
            for job in planned.spec.jobs:
                cols = declared.setdefault(job.job_type, {})
                for col in job.columns:
                    if col.name == "JobID":
                        raise BadRequest("JobID is reserved")
                    prev = cols.setdefault(col.name, col.type)
                    if prev is not col.type:
                        raise Conflict(f"{job.job_type}.{col.name} declared as {prev.value} and {col.type.value}")
        with self.transaction() as db:
            for job_type, cols in declared.items():
                for r in db.execute("SELECT name, type FROM job_columns WHERE job_type = ?", (job_type,)):
                    if r["name"] in cols and cols[r["name"]].value != r["type"]:
                        raise Conflict(
                            f"{job_type}.{r['name']} exists as {r['type']},"
                            f" submitted as {cols[r['name']].value}"
                        )
            for job_type, cols in declared.items():
                self._declare_columns(db, job_type, cols)

            next_id = (db.execute("SELECT MAX(task_id) FROM tasks").fetchone()[0] or 0) + 1
            next_group = (db.execute("SELECT MAX(task_group) FROM tasks").fetchone()[0] or 0) + 1
            ids = [next_id + i for i in range(len(plan))]
            group_ids: dict[int, int] = {}
            for planned in plan:
                if planned.group is not None and planned.group not in group_ids:
                    group_ids[planned.group] = next_group + len(group_ids)

            for tid, planned in zip(ids, plan):
                gid = group_ids.get(planned.group) if planned.group is not None else None
                dep = ids[planned.depends_on] if planned.depends_on is not None else None
                if planned.is_monitor:
                    db.execute(
                        "INSERT INTO tasks (task_id, status, task_group, is_monitor, client_dir)"
                        " VALUES (?, ?, ?, 1, '.')",
                        (tid, TaskStatus.PASSIVE.value, gid),
                    )
                    db.execute("INSERT INTO task_jobs VALUES (?, 1, ?, ?)", (tid, MONITOR_JOB, gid))
                    continue
                spec = planned.spec
                db.execute(
                    "INSERT INTO tasks (task_id, client, client_fixed, client_group, depends_on_task,"
                    " depends_on_group_node, task_group, status, client_dir, erase_on_exit)"
                    " VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    (
                        tid,
                        planned.client,
                        int(planned.client is not None),
                        planned.client_group,
                        dep,
                        int(planned.group_node),
                        gid,
                        TaskStatus.PASSIVE.value,
                        spec.client_dir,
                        int(spec.attrs.erase_on_exit),
                    ),
                )
                for no, job in enumerate(spec.jobs, start=1):
                    names = ["Timeout"] + [_q(c.name) for c in job.columns]
                    values = [job.timeout_s] + [c.value for c in job.columns]
                    cur = db.execute(
                        f"INSERT INTO {_job_table(job.job_type)} ({', '.join(names)})"
                        f" VALUES ({', '.join('?' * len(values))})",
                        values,
                    )
                    db.execute(
                        "INSERT INTO task_jobs VALUES (?, ?, ?, ?)", (tid, no, job.job_type, cur.lastrowid)
                    )
            self._event(db, "submit", detail=f"{ids[0]}-{ids[-1]}" if ids else "")
            if activate:
                self._activate(db, ids)
        return ids

    def activate(self, task_ids: Sequence[int]):
        with self.transaction() as db:
            self._activate(db, task_ids)

    def _activate(self, db, task_ids: Sequence[int]):
        for tid in task_ids:
            row = db.execute("SELECT status, is_monitor FROM tasks WHERE task_id = ?", (tid,)).fetchone()
            status = advance_status(row["status"], Event.ACTIVATE)
            if row["is_monitor"]:
                # monitors are held by the engine itself until their group drains
                status = advance_status(status, Event.CLAIM)
            db.execute("UPDATE tasks SET status = ? WHERE task_id = ?", (status.value, tid))

    # -- claiming ---------------------------------------------------------

    def _sweep_monitors(self, db):
        monitors = db.execute(
            "SELECT task_id, task_group FROM tasks WHERE is_monitor = 1 AND status = 'active'"
        ).fetchall()
        for m in monitors:
            open_count = db.execute(
                "SELECT COUNT(*) FROM tasks WHERE task_group = ? AND is_monitor = 0 AND status != 'done'",
                (m["task_group"],),
            ).fetchone()[0]
            if open_count == 0:
                db.execute("UPDATE tasks SET status = 'done' WHERE task_id = ?", (m["task_id"],))
                db.execute(
                    "UPDATE tasks SET depends_on_task = NULL WHERE depends_on_task = ?", (m["task_id"],)
                )
                self._event(db, "monitor_done", task_id=m["task_id"], detail=str(m["task_group"]))

    def _requeue(self, db, task_id: int, client: Optional[str], kind: str):
        row = db.execute("SELECT status, client_fixed FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
        status = advance_status(row["status"], Event.REQUEUE)
        if row["client_fixed"]:
            db.execute("UPDATE tasks SET status = ? WHERE task_id = ?", (status.value, task_id))
        else:
            db.execute(
                "UPDATE tasks SET status = ?, client = NULL WHERE task_id = ?", (status.value, task_id)
            )
        self._event(db, kind, task_id=task_id, client=client)

    def claim(
        self,
        client: str,
        load: Optional[float] = None,
        disk: Optional[int] = None,
        os: str = "unix",
        groups: Sequence[str] = (),
    ) -> ClaimResult:
        self.ensure_client(client, os=os, groups=groups)
        with self.transaction() as db:
            # 1. stale recovery
            stale = [
                r[0]
                for r in db.execute(
                    "SELECT task_id FROM tasks WHERE client = ? AND status = 'active' AND is_monitor = 0",
                    (client,),
                )
            ]
            for tid in stale:
                self._requeue(db, tid, client, "stale_requeue")
            # 2. group barriers
            self._sweep_monitors(db)
            # 3.-4. selection by priority
            crow = db.execute("SELECT * FROM clients WHERE name = ?", (client,)).fetchone()
            base = (
                "SELECT task_id FROM tasks WHERE status = 'waiting' AND depends_on_task IS NULL"
                " AND is_monitor = 0 AND "
            )
            queries = [(base + "client = ? ORDER BY task_id LIMIT 1", (client,))]
            if not crow["on_hold"]:
                queries.append(
                    (
                        base + "client IS NULL AND client_group IN"
                        " (SELECT client_group FROM client_groups WHERE client = ?)"
                        " ORDER BY task_id LIMIT 1",
                        (client,),
                    )
                )
                queries.append(
                    (base + "client IS NULL AND client_group IS NULL ORDER BY task_id LIMIT 1", ())
                )
            picked = None
            for sql, args in queries:
                row = db.execute(sql, args).fetchone()
                if row is not None:
                    picked = row[0]
                    break

            updates = {"last_request": self.clock()}
            if load is not None:
                updates["load"] = load
            if disk is not None:
                updates["disk"] = disk
            updates["current_task"] = picked
            sets = ", ".join(f"{k} = ?" for k in updates)
            db.execute(f"UPDATE clients SET {sets} WHERE name = ?", (*updates.values(), client))

            if picked is None:
                hint = self.rng.uniform(crow["sleep_min"], crow["sleep_max"])
                return ClaimResult(None, hint, stale)
            status = advance_status(TaskStatus.WAITING, Event.CLAIM)
            db.execute(
                "UPDATE tasks SET status = ?, client = ? WHERE task_id = ?", (status.value, client, picked)
            )
            self._event(db, "claim", task_id=picked, client=client)
            return ClaimResult(self._envelope(db, picked), None, stale)

    def _envelope(self, db, task_id: int) -> TaskEnvelope:
        task = db.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
        jobs = []
        for tj in db.execute(
            "SELECT job_no, job_type, job_id FROM task_jobs WHERE task_id = ? ORDER BY job_no", (task_id,)
        ).fetchall():
            row = db.execute(
                f"SELECT * FROM {_job_table(tj['job_type'])} WHERE JobID = ?", (tj["job_id"],)
            ).fetchone()
            cols = [
                r["name"]
                for r in db.execute(
                    "SELECT name FROM job_columns WHERE job_type = ? ORDER BY ord", (tj["job_type"],)
                )
            ]
            params = {c: render_value(row[c]) for c in cols if row[c] is not None}
            jobs.append(
                EnvelopeJob(
                    job_no=tj["job_no"],
                    job_type=tj["job_type"],
                    parameters=params,
                    timeout_s=row["Timeout"],
                )
            )
        return TaskEnvelope(task_id, task["client_dir"], tuple(jobs), bool(task["erase_on_exit"]))

    def envelope(self, task_id: int) -> TaskEnvelope:
        with self.transaction() as db:
            if db.execute("SELECT 1 FROM tasks WHERE task_id = ?", (task_id,)).fetchone() is None:
                raise NotFound(f"unknown task {task_id}")
            return self._envelope(db, task_id)

    # -- completion -------------------------------------------------------

    def complete(
        self,
        client: str,
        task_id: int,
        status_code: int,
        runtime_s: float = 0.0,
        load: float = 0.0,
        disk: int = 0,
    ) -> str:
        with self.transaction() as db:
            task = db.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
            if task is None:
                raise NotFound(f"unknown task {task_id}")
            rejected = task["status"] != TaskStatus.ACTIVE.value or task["client"] != client
            if rejected:
                # logged in a transaction of its own; raising here would roll it back
                self._event(db, "rejected_completion", task_id=task_id, client=client, detail=task["status"])
        if rejected:
            raise Conflict(f"task {task_id} is not active for {client}")
        with self.transaction() as db:
            task = db.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
            if task["status"] != TaskStatus.ACTIVE.value or task["client"] != client:
                raise Conflict(f"task {task_id} is not active for {client}")
            job_type = self._billing_job_type(db, task_id)
            db.execute(
                "INSERT INTO completions (task_id, client, job_type, status_code, runtime_s, load, disk, ts)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (task_id, client, job_type, status_code, runtime_s, load, disk, self.clock()),
            )
            db.execute(
                "UPDATE clients SET current_task = NULL, load = ?, disk = ? WHERE name = ?",
                (load, disk, client),
            )
            if status_code == 0:
                status = advance_status(task["status"], Event.COMPLETE_OK)
                db.execute("UPDATE tasks SET status = ? WHERE task_id = ?", (status.value, task_id))
                db.execute(
                    "UPDATE tasks SET client = ?, client_group = NULL, client_fixed = 1"
                    " WHERE depends_on_task = ? AND depends_on_group_node = 1",
                    (client, task_id),
                )
                db.execute("UPDATE tasks SET depends_on_task = NULL WHERE depends_on_task = ?", (task_id,))
                self._event(db, "done", task_id=task_id, client=client)
                return status.value
            if task["retries_used"] < self.max_retries:
                db.execute(
                    "UPDATE tasks SET retries_used = retries_used + 1 WHERE task_id = ?", (task_id,)
                )
                self._requeue(db, task_id, client, "retry")
                return TaskStatus.WAITING.value
            status = advance_status(task["status"], Event.COMPLETE_FAIL)
            db.execute("UPDATE tasks SET status = ? WHERE task_id = ?", (status.value, task_id))
            self._event(db, "failed", task_id=task_id, client=client, detail=str(status_code))
            return status.value

    def requeue_failed(self, task_id: int):
        with self.transaction() as db:
            task = db.execute("SELECT status FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
            if task is None:
                raise NotFound(f"unknown task {task_id}")
            self._requeue(db, task_id, None, "admin_requeue")

    @staticmethod
    def _billing_job_type(db, task_id: int) -> str:
        types = [
            r[0]
            for r in db.execute(
                "SELECT job_type FROM task_jobs WHERE task_id = ? ORDER BY job_no", (task_id,)
            )
        ]
        for t in types:
            if t not in TRANSFER_JOBS:
                return t
        return types[0] if types else ""

    # -- results ----------------------------------------------------------

    def ingest_result(self, table_name: str, sim_id: int, row: dict):
        if not IDENTIFIER.match(table_name):
            raise BadRequest(f"bad table name {table_name!r}")
        types = {k: _value_type(v) for k, v in row.items()}
        with self.transaction() as db:
            known = {
                r["name"]: r["type"]
                for r in db.execute("SELECT name, type FROM result_columns WHERE table_name = ?", (table_name,))
            }
            for name, ctype in types.items():
                if name in known and known[name] != ctype.value:
                    raise Conflict(f"{table_name}.{name} is {known[name]}, got {ctype.value}")
            for name, ctype in types.items():
                if name not in known:
                    db.execute("INSERT INTO result_columns VALUES (?, ?, ?)", (table_name, name, ctype.value))
            db.execute(
                "INSERT OR REPLACE INTO results VALUES (?, ?, ?)",
                (table_name, int(sim_id), json.dumps(row, sort_keys=True)),
            )

    def results(self, table_name: str, sim_ids: Optional[Sequence[int]] = None) -> list[dict]:
        with self.transaction() as db:
            rows = db.execute(
                "SELECT sim_id, row_json FROM results WHERE table_name = ? ORDER BY sim_id", (table_name,)
            ).fetchall()
        wanted = set(sim_ids) if sim_ids is not None else None
        out = []
        for r in rows:
            if wanted is None or r["sim_id"] in wanted:
                out.append({"SimID": r["sim_id"], **json.loads(r["row_json"])})
        return out

    def result_tables(self) -> list[str]:
        with self.transaction() as db:
            return [r[0] for r in db.execute("SELECT DISTINCT table_name FROM results ORDER BY table_name")]

    # -- administration ---------------------------------------------------

    def apply_admin_rule(self, rule: AdminRule) -> list[str]:
        """Apply one rule atomically; returns the names of affected clients."""
        with self.transaction() as db:
            def members(group: str) -> list[str]:
                return [
                    r[0]
                    for r in db.execute(
                        "SELECT client FROM client_groups WHERE client_group = ? ORDER BY client", (group,)
                    )
                ]

            def require(group: Optional[str]):
                if not group or not members(group):
                    raise RuleError(f"unknown group {group!r}")

            if rule.action == "suspend_group":
                require(rule.group)
                affected = members(rule.group)
                if rule.subset_group:
                    require(rule.subset_group)
                    subset = set(members(rule.subset_group))
                    affected = [c for c in affected if c in subset]
                suspended = f"{rule.group}_suspended"
                for c in affected:
                    db.execute(
                        "UPDATE client_groups SET client_group = ? WHERE client_group = ? AND client = ?",
                        (suspended, rule.group, c),
                    )
                    if rule.sleep_min is not None:
                        db.execute(
                            "UPDATE clients SET saved_sleep_min = sleep_min, saved_sleep_max = sleep_max,"
                            " sleep_min = ?, sleep_max = ? WHERE name = ?",
                            (rule.sleep_min, rule.sleep_max if rule.sleep_max is not None else rule.sleep_min, c),
                        )
            elif rule.action == "resume_group":
                suspended = f"{rule.group}_suspended"
                require(suspended)
                affected = members(suspended)
                for c in affected:
                    if rule.sleep_min is not None:
                        db.execute(
                            "UPDATE clients SET sleep_min = ?, sleep_max = ?,"
                            " saved_sleep_min = NULL, saved_sleep_max = NULL WHERE name = ?",
                            (rule.sleep_min, rule.sleep_max if rule.sleep_max is not None else rule.sleep_min, c),
                        )
                    else:
                        db.execute(
                            "UPDATE clients SET sleep_min = COALESCE(saved_sleep_min, sleep_min),"
                            " sleep_max = COALESCE(saved_sleep_max, sleep_max),"
                            " saved_sleep_min = NULL, saved_sleep_max = NULL WHERE name = ?",
                            (c,),
                        )
                    db.execute(
                        "DELETE FROM client_groups WHERE client_group = ? AND client = ?", (suspended, c)
                    )
                    db.execute("INSERT OR IGNORE INTO client_groups VALUES (?, ?)", (rule.group, c))
            elif rule.action == "set_sleeptime":
                if rule.sleep_min is None:
                    raise RuleError("set_sleeptime needs sleep bounds")
                lo = rule.sleep_min
                hi = rule.sleep_max if rule.sleep_max is not None else lo
                if lo > hi or lo < 0:
                    raise RuleError("bad sleep bounds")
                if rule.group:
                    require(rule.group)
                    affected = members(rule.group)
                else:
                    affected = list(rule.clients)
                for c in affected:
                    if db.execute("SELECT 1 FROM clients WHERE name = ?", (c,)).fetchone() is None:
                        raise RuleError(f"unknown client {c!r}")
                for c in affected:
                    db.execute("UPDATE clients SET sleep_min = ?, sleep_max = ? WHERE name = ?", (lo, hi, c))
            elif rule.action == "hold_high_load":
                if rule.group:
                    require(rule.group)
                    names = members(rule.group)
                else:
                    names = [r[0] for r in db.execute("SELECT name FROM clients ORDER BY name")]
                affected = []
                for c in names:
                    row = db.execute("SELECT load, load_threshold FROM clients WHERE name = ?", (c,)).fetchone()
                    threshold = row["load_threshold"] if row["load_threshold"] is not None else rule.load_threshold
                    if threshold is None:
                        continue
                    hold = row["load"] > threshold
                    db.execute("UPDATE clients SET on_hold = ? WHERE name = ?", (int(hold), c))
                    if hold:
                        affected.append(c)
            else:
                raise RuleError(f"unknown rule action {rule.action!r}")
            self._event(db, f"rule:{rule.action}", detail=",".join(affected))
            return affected

    # -- reporting --------------------------------------------------------

    def billing(
        self, by: str = "client", start: Optional[float] = None, end: Optional[float] = None
    ) -> list[tuple[str, float]]:
        """Charged time per key: runtime * performance factor / max(1, load)."""
        if by not in ("client", "job_type"):
            raise BadRequest(f"cannot group billing by {by!r}")
        with self.transaction() as db:
            rows = db.execute(
                "SELECT c.client, c.job_type, c.runtime_s, c.load, c.ts,"
                " COALESCE(k.performance_factor, 1.0) AS factor"
                " FROM completions c LEFT JOIN clients k ON k.name = c.client ORDER BY c.id"
            ).fetchall()
        totals: dict[str, float] = {}
        for r in rows:
            if start is not None and r["ts"] < start:
                continue
            if end is not None and r["ts"] > end:
                continue
            key = r[by]
            totals[key] = totals.get(key, 0.0) + r["runtime_s"] * r["factor"] / max(1.0, r["load"])
        return sorted(totals.items())

    def record_completion(self, task_id: int, client: str, job_type: str, runtime_s: float, load: float,
                          status_code: int = 0, disk: int = 0, ts: Optional[float] = None):
        """Append a raw completion log row (used for imports and tests)."""
        with self.transaction() as db:
            db.execute(
                "INSERT INTO completions (task_id, client, job_type, status_code, runtime_s, load, disk, ts)"
                " VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (task_id, client, job_type, status_code, runtime_s, load, disk, self.clock() if ts is None else ts),
            )

    def task(self, task_id: int) -> dict:
        with self.transaction() as db:
            row = db.execute("SELECT * FROM tasks WHERE task_id = ?", (task_id,)).fetchone()
            if row is None:
                raise NotFound(f"unknown task {task_id}")
            return self._task_dict(db, row)

    @staticmethod
    def _task_dict(db, row) -> dict:
        out = dict(row)
        out["jobs"] = [
            [r[0], r[1]]
            for r in db.execute(
                "SELECT job_type, job_id FROM task_jobs WHERE task_id = ? ORDER BY job_no", (row["task_id"],)
            )
        ]
        return out

    def status(self, task_ids: Optional[Sequence[int]] = None, include_log: bool = True) -> dict:
        with self.transaction() as db:
            if task_ids is None:
                rows = db.execute("SELECT * FROM tasks ORDER BY task_id").fetchall()
            else:
                rows = []
                for tid in task_ids:
                    row = db.execute("SELECT * FROM tasks WHERE task_id = ?", (tid,)).fetchone()
                    if row is not None:
                        rows.append(row)
            tasks = [self._task_dict(db, r) for r in rows]
            out = {"tasks": tasks}
            if include_log:
                clients = []
                for r in db.execute("SELECT * FROM clients ORDER BY name").fetchall():
                    c = dict(r)
                    c["groups"] = sorted(
                        g[0]
                        for g in db.execute(
                            "SELECT client_group FROM client_groups WHERE client = ?", (r["name"],)
                        )
                    )
                    clients.append(c)
                out["clients"] = clients
                out["events"] = [dict(r) for r in db.execute("SELECT * FROM events ORDER BY id")]
                out["completions"] = [dict(r) for r in db.execute("SELECT * FROM completions ORDER BY id")]
        if include_log:
            out["results"] = {t: self.results(t) for t in self.result_tables()}
        return out
