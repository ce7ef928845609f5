"""Server-side file repository rooted at one directory."""
from __future__ import annotations

import hashlib
import os
import tempfile
import threading
from pathlib import Path
from typing import BinaryIO, Optional

from gridflow.model import FileMeta

CHUNK = 1 << 16


class Forbidden(Exception):
    pass


def md5_file(path: os.PathLike) -> tuple[str, int]:
    digest = hashlib.md5()
    size = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(CHUNK), b""):
            digest.update(chunk)
            size += len(chunk)
    return digest.hexdigest(), size


class Repository:
    def __init__(self, root: os.PathLike):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[Path, threading.Lock] = {}
        self._guard = threading.Lock()

    def resolve(self, server_dir: str, file_name: str = "") -> Path:
        parts = [p for p in (server_dir or "").replace("\\", "/").split("/") if p not in ("", ".")]
        if file_name:
            if "/" in file_name or "\\" in file_name:
                raise Forbidden(file_name)
            parts.append(file_name)
        if ".." in parts:
            raise Forbidden("/".join(parts))
        path = self.root.joinpath(*parts).resolve()
        if path != self.root and self.root not in path.parents:
            raise Forbidden(str(path))
        return path

    def split(self, rel_path: str) -> tuple[str, str]:
        rel = rel_path.strip("/")
        server_dir, _, name = rel.rpartition("/")
        return server_dir, name

    def _lock_for(self, path: Path) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(path, threading.Lock())

    def write(self, server_dir: str, file_name: str, stream: BinaryIO) -> FileMeta:
        """Store ``stream`` atomically; concurrent writers to one path are sequenced."""
        target = self.resolve(server_dir, file_name)
        if not file_name:
            raise Forbidden("empty file name")
        target.parent.mkdir(parents=True, exist_ok=True)
        with self._lock_for(target):
            digest = hashlib.md5()
            size = 0
            fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".upload-")
            try:
                with os.fdopen(fd, "wb") as out:
                    for chunk in iter(lambda: stream.read(CHUNK), b""):
                        digest.update(chunk)
                        size += len(chunk)
                        out.write(chunk)
                os.replace(tmp, target)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise
            return FileMeta(self.normdir(server_dir), file_name, size, digest.hexdigest(), target.stat().st_mtime)

    @staticmethod
    def normdir(server_dir: str) -> str:
        return "/".join(p for p in (server_dir or "").replace("\\", "/").split("/") if p not in ("", "."))

    def meta(self, server_dir: str, file_name: str) -> Optional[FileMeta]:
        path = self.resolve(server_dir, file_name)
        if not path.is_file():
            return None
        md5, size = md5_file(path)
        return FileMeta(self.normdir(server_dir), file_name, size, md5, path.stat().st_mtime)

    def scan(self):
        """Yield metadata for every file below the root (startup indexing)."""
        for dirpath, _, names in os.walk(self.root):
            rel = Path(dirpath).relative_to(self.root).as_posix()
            for name in sorted(names):
                if name.startswith(".upload-"):
                    continue
                yield self.meta("" if rel == "." else rel, name)
