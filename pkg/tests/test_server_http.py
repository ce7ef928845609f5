import hashlib
import http.client
import io
import os

import pytest
import requests

from gridflow.client import EngineHTTPError
from gridflow.model import decode_workflow
from gridflow.server.files import Forbidden, Repository

TASK = '<Task ClientDir="d"><Job Type="JobA"><Column Name="x" Type="INTEGER" Value="1"/></Job></Task>'


def test_idle_poll_returns_204_with_sleep_hint(live):
    resp = requests.get(live.url + "/engine/Tasks", params={"Client": "c1", "Load": "0.5", "Disk": "10"})
    assert resp.status_code == 204
    hint = float(resp.headers["Sleep-Hint-Seconds"])
    assert 60 <= hint <= 300
    assert live.store.client("c1")["load"] == 0.5


def test_poll_returns_envelope_and_completion(live):
    tid, = live.api.submit(TASK)
    poll = live.api.poll("c1")
    assert poll.envelope.task_id == tid
    assert poll.envelope.jobs[0].parameters == {"x": "1"}
    assert live.api.task_completed("c1", tid, 0, 0.1) == "done"
    with pytest.raises(EngineHTTPError) as info:
        live.api.task_completed("c1", tid, 0, 0.1)
    assert info.value.status == 409


def test_empty_client_name_rejected(live):
    assert requests.get(live.url + "/engine/Tasks", params={"Client": " "}).status_code == 400


def test_bad_workflow_is_400(live):
    resp = requests.post(live.url + "/engine/Submit", data=b"<Task ClientDir='d'/>")
    assert resp.status_code == 400


def test_empty_file_md5(live):
    meta = live.api.upload("empty", "nothing.dat", b"")
    assert meta["md5"] == "d41d8cd98f00b204e9800998ecf8427e"
    assert meta["length"] == 0
    head = live.api.head("empty", "nothing.dat")
    assert head.md5 == "d41d8cd98f00b204e9800998ecf8427e" and head.length == 0


def test_upload_download_one_mebibyte(live):
    data = os.urandom(1 << 20)
    meta = live.api.upload("big/sub", "blob.bin", data)
    assert meta["md5"] == hashlib.md5(data).hexdigest()
    buf = io.BytesIO()
    assert live.api.download("big/sub", "blob.bin", buf) == len(data)
    assert buf.getvalue() == data
    resp = requests.head(live.url + "/files/big/sub/blob.bin")
    assert resp.headers["X-File-MD5"] == meta["md5"]
    assert resp.headers["X-File-Length"] == str(1 << 20)
    assert "X-File-Modified" in resp.headers


@pytest.mark.parametrize("path", ["../secret", "a/../../secret", "%2e%2e/secret", "a/%2e%2e/%2e%2e/secret"])
def test_traversal_forbidden(live, path):
    (live.root / "secret").write_text("x")
    # http.client sends the path verbatim; requests would normalise the dots away
    conn = http.client.HTTPConnection("127.0.0.1", live.server.port)
    conn.request("GET", "/files/" + path)
    resp = conn.getresponse()
    assert resp.status == 403
    assert resp.read() != b"x"
    conn.close()


def test_upload_outside_repository_forbidden(live):
    resp = requests.post(live.url + "/engine/Upload", data={"ServerDir": "../x"},
                         files={"File": ("f.txt", b"data")})
    assert resp.status_code == 403
    assert not (live.root / "x").exists()


def test_repository_resolve_forbids_escape(tmp_path):
    repo = Repository(tmp_path / "r")
    for server_dir, name in [("..", "f"), ("a/../..", "f"), ("a", "../f"), ("a", "b/c")]:
        with pytest.raises(Forbidden):
            repo.resolve(server_dir, name)


def test_missing_file_404(live):
    with pytest.raises(EngineHTTPError) as info:
        live.api.head("nope", "none.txt")
    assert info.value.status == 404


def test_results_roundtrip(live):
    live.api.post_result("T", 2, {"f4": 28.5, "tag": "b"})
    live.api.post_result("T", 1, {"f4": 27.0, "tag": "a"})
    rows = live.api.results("T")
    assert [r["SimID"] for r in rows] == [1, 2]
    assert live.api.results("T", [2]) == [{"SimID": 2, "f4": 28.5, "tag": "b"}]


def test_status_and_admin_endpoints(live):
    live.api.configure_client("n1", Groups=["cluster", "reserved"])
    live.api.configure_client("n2", Groups=["cluster"])
    assert live.api.admin(action="suspend_group", group="cluster", subset_group="reserved",
                          sleep_min=3600, sleep_max=3600) == ["n1"]
    clients = {c["name"]: c for c in live.api.status()["clients"]}
    assert clients["n1"]["groups"] == ["cluster_suspended", "reserved"]
    assert clients["n1"]["sleep_min"] == 3600
    assert live.api.admin(action="resume_group", group="cluster", sleep_min=60, sleep_max=300) == ["n1"]
    with pytest.raises(EngineHTTPError) as info:
        live.api.admin(action="nonsense")
    assert info.value.status == 400


def test_aliases_endpoint(live):
    live.api.set_alias("JAVA", "java")
    live.api.set_alias("JAVA", "/opt/java", scope="client", target="c1")
    assert live.api.aliases("c1") == {"JAVA": "/opt/java"}
    assert live.api.aliases("c2") == {"JAVA": "java"}


def test_requeue_and_billing_endpoints(live):
    wf = decode_workflow(TASK)
    tid, = live.store.submit(wf)
    live.api.poll("c1")
    live.api.task_completed("c1", tid, 5, 2.0)
    live.api.poll("c1")
    live.api.task_completed("c1", tid, 5, 2.0)
    assert live.store.task(tid)["status"] == "failed"
    live.api.requeue(tid)
    assert live.store.task(tid)["status"] == "waiting"
    assert live.api.billing("client") == [("c1", 4.0)]
