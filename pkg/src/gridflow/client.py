"""Thin HTTP client for the engine endpoints, shared by workers, jobs and submitters."""
from __future__ import annotations

import os
import urllib.parse
from dataclasses import dataclass
from typing import BinaryIO, Optional, Sequence

import requests

from gridflow.model import FileMeta, TaskEnvelope, decode_task_envelope


class EngineHTTPError(Exception):
    def __init__(self, status: int, message: str):
        self.status = status
        super().__init__(f"HTTP {status}: {message}")


@dataclass
class Poll:
    envelope: Optional[TaskEnvelope]
    sleep_hint: Optional[float]


def quote_path(*parts: str) -> str:
    segments = []
    for part in parts:
        segments.extend(s for s in part.replace("\\", "/").split("/") if s)
    return "/".join(urllib.parse.quote(s, safe="") for s in segments)


class EngineClient:
    def __init__(self, server_url: str, timeout: float = 30.0):
        self.base = server_url.rstrip("/")
        self.timeout = timeout
        self.session = requests.Session()
        self.bytes_downloaded = 0

    def close(self):
        self.session.close()

    def _check(self, resp: requests.Response) -> requests.Response:
        if resp.status_code >= 400:
            raise EngineHTTPError(resp.status_code, resp.text.strip())
        return resp

    def _get(self, path: str, **kw) -> requests.Response:
        return self._check(self.session.get(self.base + path, timeout=self.timeout, **kw))

    def _post(self, path: str, **kw) -> requests.Response:
        return self._check(self.session.post(self.base + path, timeout=self.timeout, **kw))

    # -- worker side ------------------------------------------------------

    def poll(
        self,
        client: str,
        load: Optional[float] = None,
        disk: Optional[int] = None,
        group: Optional[str] = None,
        os_name: Optional[str] = None,
    ) -> Poll:
        params: dict = {"Client": client}
        if load is not None:
            params["Load"] = f"{load:.2f}"
        if disk is not None:
            params["Disk"] = str(disk)
        if group:
            params["Group"] = group
        if os_name:
            params["OS"] = os_name
        resp = self._get("/engine/Tasks", params=params)
        if resp.status_code == 204:
            return Poll(None, float(resp.headers.get("Sleep-Hint-Seconds", "0")))
        return Poll(decode_task_envelope(resp.content), None)

    def task_completed(
        self, client: str, task_id: int, status: int, runtime_s: float, load: float = 0.0, disk: int = 0
    ) -> str:
        data = {
            "Client": client,
            "TaskID": str(task_id),
            "Status": "ok" if status == 0 else str(status),
            "Runtime": f"{runtime_s:.6f}",
            "Load": f"{load:.2f}",
            "Disk": str(disk),
        }
        return self._post("/engine/TaskCompleted", data=data).text.strip()

    def aliases(self, client: str) -> dict[str, str]:
        text = self._get("/engine/Aliases", params={"Client": client}).text
        out = {}
        for line in text.splitlines():
            name, sep, value = line.partition("=")
            if sep:
                out[name] = value
        return out

    def set_alias(self, name: str, value: str, scope: str = "global", target: str = ""):
        self._post("/engine/Aliases", data={"Name": name, "Value": value, "Scope": scope, "Target": target})

    def head(self, server_dir: str, file_name: str) -> FileMeta:
        url = f"{self.base}/files/{quote_path(server_dir, file_name)}"
        resp = self._check(self.session.head(url, timeout=self.timeout))
        md5 = resp.headers.get("X-File-MD5")
        length = resp.headers.get("X-File-Length")
        return FileMeta(server_dir, file_name, int(length) if length else None, md5)

    def download(self, server_dir: str, file_name: str, dest: BinaryIO) -> int:
        url = f"{self.base}/files/{quote_path(server_dir, file_name)}"
        with self.session.get(url, timeout=self.timeout, stream=True) as resp:
            self._check(resp)
            n = 0
            for chunk in resp.iter_content(1 << 16):
                dest.write(chunk)
                n += len(chunk)
        self.bytes_downloaded += n
        return n

    def fetch_bytes(self, server_dir: str, file_name: str) -> bytes:
        url = f"{self.base}/files/{quote_path(server_dir, file_name)}"
        return self._get(url[len(self.base):]).content

    def upload(self, server_dir: str, file_name: str, source) -> dict:
        """``source`` is a path or a bytes payload."""
        if isinstance(source, (bytes, bytearray)):
            files = {"File": (file_name, bytes(source))}
            return self._post("/engine/Upload", data={"ServerDir": server_dir, "FileName": file_name},
                              files=files).json()
        with open(source, "rb") as fh:
            files = {"File": (file_name, fh)}
            return self._post("/engine/Upload", data={"ServerDir": server_dir, "FileName": file_name},
                              files=files).json()

    # -- submitter side ---------------------------------------------------

    def submit(self, workflow_xml: str) -> list[int]:
        resp = self._post("/engine/Submit", data=workflow_xml.encode(),
                          headers={"Content-Type": "application/xml"})
        return [int(x) for x in resp.text.split()]

    def post_result(self, table: str, sim_id: int, row: dict):
        self._post("/engine/Results", json={"Table": table, "SimID": sim_id, "Row": row})

    def results(self, table: str, sim_ids: Optional[Sequence[int]] = None) -> list[dict]:
        params = {"Table": table}
        if sim_ids is not None:
            params["SimID"] = ",".join(str(i) for i in sim_ids)
        return self._get("/engine/Results", params=params).json()

    def status(self, task_ids: Optional[Sequence[int]] = None, log: bool = True) -> dict:
        params = {"Log": "1" if log else "0"}
        if task_ids is not None:
            params["Tasks"] = ",".join(str(i) for i in task_ids)
        return self._get("/engine/Status", params=params).json()

    def admin(self, **rule) -> list[str]:
        return self._post("/engine/Admin", json=rule).json()["affected"]

    def configure_client(self, client: str, **fields) -> dict:
        return self._post("/engine/Client", json={"Client": client, **fields}).json()

    def billing(self, by: str = "client") -> list[tuple[str, float]]:
        text = self._get("/engine/Billing", params={"By": by}).text
        rows = []
        for line in text.splitlines()[1:]:
            key, _, value = line.rpartition(",")
            rows.append((key, float(value)))
        return rows

    def requeue(self, task_id: int):
        self._post("/engine/Requeue", data={"TaskID": str(task_id)})


def upload_tree(client: EngineClient, local_dir: str, server_dir: str = ""):
    """Upload every file under ``local_dir`` mirroring its layout."""
    for dirpath, _, names in os.walk(local_dir):
        rel = os.path.relpath(dirpath, local_dir)
        target = server_dir if rel == "." else "/".join(p for p in (server_dir, rel.replace(os.sep, "/")) if p)
        for name in sorted(names):
            client.upload(target, name, os.path.join(dirpath, name))
