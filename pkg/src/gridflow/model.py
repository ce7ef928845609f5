"""Domain types, the task status machine and the XML codecs.

Two documents travel over the wire: the task envelope a worker receives from
``/engine/Tasks`` and the workflow description a submitter posts to
``/engine/Submit``.  Both are plain XML; attribute order is not significant.
"""
from __future__ import annotations

import enum
import re
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

IDENTIFIER = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
MONITOR_JOB = "MonitorTaskGroup"

Value = Union[str, int, float]


class ModelError(ValueError):
    """Base class for validation and decoding errors."""


class EnvelopeParseError(ModelError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SchemaError(ModelError):
    pass


class WorkflowValidationError(ModelError):
    pass


class TransitionError(ModelError):
    def __init__(self, current: "TaskStatus", event: str):
        self.current = current
        self.event = event
        super().__init__(f"illegal transition: {current.value} --{event}-->")


class TaskStatus(str, enum.Enum):
    PASSIVE = "passive"
    WAITING = "waiting"
    ACTIVE = "active"
    DONE = "done"
    FAILED = "failed"


class Event(str, enum.Enum):
    ACTIVATE = "activate"
    CLAIM = "claim"
    COMPLETE_OK = "complete_ok"
    COMPLETE_FAIL = "complete_fail"
    REQUEUE = "requeue"


_TRANSITIONS = {
    (TaskStatus.PASSIVE, Event.ACTIVATE): TaskStatus.WAITING,
    (TaskStatus.WAITING, Event.CLAIM): TaskStatus.ACTIVE,
    (TaskStatus.ACTIVE, Event.COMPLETE_OK): TaskStatus.DONE,
    (TaskStatus.ACTIVE, Event.COMPLETE_FAIL): TaskStatus.FAILED,
    (TaskStatus.ACTIVE, Event.REQUEUE): TaskStatus.WAITING,
    # explicit admin re-queue
    (TaskStatus.FAILED, Event.REQUEUE): TaskStatus.WAITING,
}


def advance_status(current: Union[TaskStatus, str], event: Union[Event, str]) -> TaskStatus:
    current = TaskStatus(current)
    event = Event(event)
    try:
        return _TRANSITIONS[(current, event)]
    except KeyError:
        raise TransitionError(current, event.value) from None


class ColumnType(str, enum.Enum):
    VARCHAR = "VARCHAR"
    DOUBLE = "DOUBLE"
    INTEGER = "INTEGER"

    def coerce(self, raw: Value) -> Value:
        if self is ColumnType.VARCHAR:
            return str(raw)
        if self is ColumnType.DOUBLE:
            return float(raw)
        if isinstance(raw, float):
            raise ValueError(f"not an integer: {raw!r}")
        return int(raw)


def render_value(value: Value) -> str:
    # repr keeps floats round-trippable
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Column:
    name: str
    type: ColumnType
    value: Value


@dataclass(frozen=True)
class JobSpec:
    job_type: str
    columns: tuple[Column, ...] = ()
    timeout_s: Optional[int] = None
    job_id: Optional[int] = None

    def __post_init__(self):
        if not IDENTIFIER.match(self.job_type):
            raise SchemaError(f"bad job type {self.job_type!r}")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in {self.job_type}: {names}")
        for name in names:
            if not IDENTIFIER.match(name):
                raise SchemaError(f"bad column name {name!r}")
        if self.timeout_s is not None and self.timeout_s <= 0:
            raise SchemaError("timeout must be positive")

    def params(self) -> dict[str, str]:
        return {c.name: render_value(c.value) for c in self.columns}


@dataclass(frozen=True)
class FileMeta:
    server_dir: str
    file_name: str
    length: Optional[int] = None
    md5: Optional[str] = None
    last_modified: Optional[float] = None

    def __post_init__(self):
        if self.md5 is not None and not re.fullmatch(r"[0-9a-f]{32}", self.md5):
            raise SchemaError(f"bad md5 {self.md5!r}")
        if self.length is not None and self.length < 0:
            raise SchemaError("negative length")


class Scope(str, enum.Enum):
    CLIENT = "client"
    GROUP = "group"
    GLOBAL = "global"


@dataclass(frozen=True)
class AliasEntry:
    name: str
    value: str
    scope: Scope = Scope.GLOBAL
    target: Optional[str] = None  # client or group name for the narrower scopes


@dataclass(frozen=True)
class TaskRecord:
    """One row of the task table; ``jobs`` lists (job_type, job_id) in execution order."""

    task_id: int
    jobs: tuple[tuple[str, int], ...]
    status: TaskStatus = TaskStatus.PASSIVE
    client: Optional[str] = None
    client_group: Optional[str] = None
    client_fixed: bool = False
    depends_on_task: Optional[int] = None
    depends_on_group_node: bool = False
    task_group: Optional[int] = None
    client_dir: str = "."
    erase_on_exit: bool = False
    retries_used: int = 0

    @property
    def job_type(self) -> str:
        return self.jobs[0][0] if self.jobs else ""

    @property
    def is_monitor(self) -> bool:
        return self.job_type == MONITOR_JOB


@dataclass(frozen=True)
class ClientRecord:
    name: str
    os: str = "unix"
    last_request: Optional[float] = None
    sleep_min_s: int = 60
    sleep_max_s: int = 300
    load: float = 0.0
    disk_free_kb: int = 0
    current_task: Optional[int] = None
    performance_factor: float = 1.0
    groups: frozenset[str] = frozenset()
    on_hold: bool = False


def check_client_dir(client_dir: str) -> str:
    parts = client_dir.replace("\\", "/").split("/")
    if client_dir.startswith(("/", "\\")) or re.match(r"^[A-Za-z]:", client_dir) or ".." in parts:
        raise SchemaError(f"client dir must be relative without '..': {client_dir!r}")
    return client_dir


# -- task envelope -----------------------------------------------------------


@dataclass(frozen=True)
class EnvelopeJob:
    job_no: int
    job_type: str
    parameters: Mapping[str, str] = field(default_factory=dict)
    timeout_s: Optional[int] = None


@dataclass(frozen=True)
class TaskEnvelope:
    task_id: int
    client_dir: str
    jobs: tuple[EnvelopeJob, ...] = ()
    erase_on_exit: bool = False

    def __post_init__(self):
        nos = [j.job_no for j in self.jobs]
        if nos != list(range(1, len(nos) + 1)):
            raise SchemaError(f"job numbers must be consecutive from 1, got {nos}")
        check_client_dir(self.client_dir)


def _to_bool(text: Optional[str]) -> bool:
    return (text or "").strip().lower() in ("true", "1", "yes")


def _parse(doc: Union[str, bytes]) -> ET.Element:
    try:
        return ET.fromstring(doc)
    except ET.ParseError as exc:
        line = exc.position[0] if exc.position else None
        raise EnvelopeParseError(str(exc), line) from None


def encode_task_envelope(envelope: TaskEnvelope) -> str:
    root = ET.Element("Task", ID=str(envelope.task_id), ClientDir=envelope.client_dir)
    if envelope.erase_on_exit:
        root.set("EraseOnExit", "true")
    for job in envelope.jobs:
        el = ET.SubElement(root, "Job", No=str(job.job_no), Type=job.job_type)
        if job.timeout_s is not None:
            el.set("Timeout", str(job.timeout_s))
        ET.SubElement(el, "Parameter", dict(job.parameters))
    ET.indent(root, space=" ")
    return ET.tostring(root, encoding="unicode") + "\n"


def decode_task_envelope(doc: Union[str, bytes]) -> TaskEnvelope:
    root = _parse(doc)
    if root.tag != "Task":
        raise SchemaError(f"expected <Task> root, got <{root.tag}>")
    if "ID" not in root.attrib:
        raise SchemaError("Task element has no ID")
    try:
        task_id = int(root.get("ID"))
        jobs = []
        for el in root.findall("Job"):
            params: dict[str, str] = {}
            for p in el.findall("Parameter"):
                params.update(p.attrib)
            timeout = el.get("Timeout")
            jobs.append(
                EnvelopeJob(
                    job_no=int(el.get("No", "0")),
                    job_type=el.get("Type", ""),
                    parameters=params,
                    timeout_s=int(timeout) if timeout else None,
                )
            )
    except ValueError as exc:
        raise SchemaError(str(exc)) from None
    return TaskEnvelope(
        task_id=task_id,
        client_dir=root.get("ClientDir", "."),
        jobs=tuple(jobs),
        erase_on_exit=_to_bool(root.get("EraseOnExit")),
    )


# -- workflow description ----------------------------------------------------


@dataclass(frozen=True)
class TaskAttrs:
    start_task_chain: bool = False
    close_task_chain: bool = False
    start_task_group: bool = False
    close_task_group: bool = False
    start_depends_on_group_node: bool = False
    start_depends_on_client: Optional[str] = None
    start_depends_on_client_group: Optional[str] = None
    erase_on_exit: bool = False


_BOOL_ATTRS = {
    "startTaskChain": "start_task_chain",
    "closeTaskChain": "close_task_chain",
    "startTaskGroup": "start_task_group",
    "closeTaskGroup": "close_task_group",
    "startDependsOnGroupNode": "start_depends_on_group_node",
    "EraseOnExit": "erase_on_exit",
}
_STR_ATTRS = {
    "startDependsOnClient": "start_depends_on_client",
    "startDependsOnClientGroup": "start_depends_on_client_group",
}


@dataclass(frozen=True)
class TaskSpec:
    client_dir: str
    jobs: tuple[JobSpec, ...]
    attrs: TaskAttrs = TaskAttrs()


@dataclass(frozen=True)
class WorkflowDescription:
    tasks: tuple[TaskSpec, ...]


def _decode_job(el: ET.Element) -> JobSpec:
    job_type = el.get("Type", "")
    columns: list[Column] = []
    timeout = el.get("Timeout")
    for child in el:
        if child.tag == "Column":
            name = child.get("Name", "")
            try:
                ctype = ColumnType(child.get("Type", ""))
            except ValueError:
                raise WorkflowValidationError(
                    f"unknown column type {child.get('Type')!r} for {job_type}.{name}"
                ) from None
            try:
                value = ctype.coerce(child.get("Value", ""))
            except ValueError as exc:
                raise WorkflowValidationError(f"{job_type}.{name}: {exc}") from None
            if name == "Timeout":
                timeout = str(value)
                continue
            columns.append(Column(name, ctype, value))
        else:
            # shorthand element such as <Download Dir=".." File=".."/>
            for name, value in child.attrib.items():
                columns.append(Column(name, ColumnType.VARCHAR, value))
    try:
        return JobSpec(job_type, tuple(columns), int(timeout) if timeout else None)
    except (SchemaError, ValueError) as exc:
        raise WorkflowValidationError(str(exc)) from None


def decode_workflow(doc: Union[str, bytes]) -> WorkflowDescription:
    text = doc.decode() if isinstance(doc, bytes) else doc
    text = re.sub(r"^\s*<\?xml[^>]*\?>", "", text)
    if not text.lstrip().startswith("<Workflow"):
        # bare task sequence; the wrapper keeps line numbers unchanged
        text = "<Workflow>" + text + "</Workflow>"
    root = _parse(text)
    tasks = []
    for el in root.findall("Task"):
        kwargs = {}
        for attr, key in _BOOL_ATTRS.items():
            kwargs[key] = _to_bool(el.get(attr))
        for attr, key in _STR_ATTRS.items():
            val = el.get(attr)
            kwargs[key] = val.strip() if val and val.strip() else None
        jobs = tuple(_decode_job(j) for j in el.findall("Job"))
        if not jobs:
            raise WorkflowValidationError("every task needs at least one job")
        client_dir = el.get("ClientDir", ".")
        try:
            check_client_dir(client_dir)
        except SchemaError as exc:
            raise WorkflowValidationError(str(exc)) from None
        tasks.append(TaskSpec(client_dir, jobs, TaskAttrs(**kwargs)))
    wf = WorkflowDescription(tuple(tasks))
    plan_workflow(wf)  # raises on unbalanced chain/group attributes
    return wf


def encode_workflow(wf: WorkflowDescription) -> str:
    root = ET.Element("Workflow")
    for task in wf.tasks:
        el = ET.SubElement(root, "Task", ClientDir=task.client_dir)
        for attr, key in _BOOL_ATTRS.items():
            if getattr(task.attrs, key):
                el.set(attr, "true")
        for attr, key in _STR_ATTRS.items():
            if getattr(task.attrs, key) is not None:
                el.set(attr, getattr(task.attrs, key))
        for job in task.jobs:
            jel = ET.SubElement(el, "Job", Type=job.job_type)
            if job.timeout_s is not None:
                jel.set("Timeout", str(job.timeout_s))
            for col in job.columns:
                ET.SubElement(
                    jel, "Column", Name=col.name, Type=col.type.value, Value=render_value(col.value)
                )
    ET.indent(root, space=" ")
    return ET.tostring(root, encoding="unicode") + "\n"


# -- dependency wiring -------------------------------------------------------


@dataclass
class PlannedTask:
    """A task to insert.  ``depends_on`` indexes into the plan list."""

    spec: Optional[TaskSpec]
    depends_on: Optional[int] = None
    group: Optional[int] = None  # local group number, 1-based
    group_node: bool = False
    client: Optional[str] = None
    client_group: Optional[str] = None

    @property
    def is_monitor(self) -> bool:
        return self.spec is None


def plan_workflow(wf: WorkflowDescription) -> list[PlannedTask]:
    """Resolve chain/group attributes into explicit dependencies.

    ``startDependsOnClient``/``startDependsOnClientGroup`` are sticky: they hold
    for following tasks until another one of them appears.  Inside a group every
    ``startTaskChain`` opens a branch; a task outside any branch chain is a
    branch of its own.  Each group is followed by a monitor task on which the
    next task after the group depends.
    """
    plan: list[PlannedTask] = []
    ctx_client: Optional[str] = None
    ctx_group: Optional[str] = None
    main_open = branch_open = in_group = False
    main_pin = branch_pin = False
    main_prev: Optional[int] = None
    branch_prev: Optional[int] = None
    group_pred: Optional[int] = None
    pending: Optional[int] = None
    group_no = 0

    def fail(i: int, msg: str):
        raise WorkflowValidationError(f"task #{i + 1}: {msg}")

    for i, task in enumerate(wf.tasks):
        a = task.attrs
        if a.start_depends_on_client and a.start_depends_on_client_group:
            fail(i, "both startDependsOnClient and startDependsOnClientGroup given")
        if a.start_depends_on_client:
            ctx_client, ctx_group = a.start_depends_on_client, None
        elif a.start_depends_on_client_group:
            ctx_client, ctx_group = None, a.start_depends_on_client_group
        if a.start_depends_on_group_node and not a.start_task_chain:
            fail(i, "startDependsOnGroupNode requires startTaskChain")
        if a.close_task_group and not (in_group or a.start_task_group):
            fail(i, "closeTaskGroup without startTaskGroup")

        idx = len(plan)
        pinned = False
        if a.start_task_group:
            if in_group:
                fail(i, "nested task groups are not supported")
            in_group = True
            group_no += 1
            group_pred = main_prev if main_open else pending
            pending = None

        if in_group:
            if a.start_task_chain:
                if branch_open:
                    fail(i, "startTaskChain inside an open branch")
                branch_open, branch_pin = True, a.start_depends_on_group_node
                dep = group_pred
            elif branch_open:
                dep = branch_prev
                pinned = branch_pin
            else:
                dep = group_pred
            branch_prev = idx
            group = group_no
        else:
            if a.start_task_chain:
                if main_open:
                    fail(i, "startTaskChain inside an open chain")
                main_open, main_pin = True, a.start_depends_on_group_node
                dep = pending
            elif main_open:
                dep = main_prev
                pinned = main_pin and pending is None
            else:
                dep = pending
            pending = None
            main_prev = idx
            group = None

        if dep is not None and plan[dep].is_monitor:
            pinned = False
        plan.append(
            PlannedTask(
                spec=task,
                depends_on=dep,
                group=group,
                group_node=pinned and ctx_client is None,
                client=ctx_client,
                client_group=ctx_group,
            )
        )

        if a.close_task_chain:
            if in_group and branch_open:
                branch_open = False
            elif not in_group and main_open:
                main_open = False
            else:
                fail(i, "closeTaskChain without startTaskChain")
        if a.close_task_group:
            if branch_open:
                fail(i, "closeTaskGroup with an open branch chain")
            plan.append(PlannedTask(spec=None, group=group_no))
            in_group = False
            pending = len(plan) - 1
            if main_open:
                main_prev = pending

    if main_open or branch_open:
        raise WorkflowValidationError("unbalanced startTaskChain/closeTaskChain")
    if in_group:
        raise WorkflowValidationError("unbalanced startTaskGroup/closeTaskGroup")
    return plan


def iter_jobs(wf: WorkflowDescription) -> Iterable[JobSpec]:
    for task in wf.tasks:
        yield from task.jobs
