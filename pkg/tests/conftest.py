import random
import threading

import pytest

from gridflow.client import EngineClient
from gridflow.server import Engine, ServerThread
from gridflow.server.files import Repository
from gridflow.server.store import EngineStore
from gridflow.worker.client import Worker, WorkerConfig

# filled by test_acceptance via the ``criterion`` fixture
CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def store():
    s = EngineStore(rng=random.Random(0))
    yield s
    s.close()


class LiveEngine:
    """Threaded HTTP engine plus in-process workers."""

    def __init__(self, root):
        self.root = root
        self.store = EngineStore(str(root / "engine.db"), rng=random.Random(0))
        self.repo = Repository(root / "repository")
        self.engine = Engine(self.store, self.repo)
        self.server = ServerThread(self.engine).start()
        self.url = self.server.url
        self.api = EngineClient(self.url)
        self.workers: list[tuple[Worker, threading.Thread]] = []

    def add_worker(self, name, group="cluster", os="unix", time_scale=1e4, start=True) -> Worker:
        cfg = WorkerConfig(self.url, name, self.root / "workers" / name, group=group, os=os,
                           time_scale=time_scale, retry_interval_s=1.0)
        w = Worker(cfg)
        if start:
            t = threading.Thread(target=w.poll_loop, daemon=True, name=f"worker-{name}")
            t.start()
            self.workers.append((w, t))
        return w

    def close(self):
        for w, _ in self.workers:
            w.stop()
        for _, t in self.workers:
            t.join(10)
        self.api.close()
        self.server.stop()
        self.store.close()


@pytest.fixture
def live(tmp_path):
    eng = LiveEngine(tmp_path)
    yield eng
    eng.close()


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for the acceptance summary."""

    def record(number: int, text: str):
        request.node._criterion = (number, text)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    tag = getattr(item, "_criterion", None)
    if tag is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, text = tag
    CRITERIA[number] = ("PASS" if rep.passed else "FAIL", text)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        verdict, text = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {text}")
