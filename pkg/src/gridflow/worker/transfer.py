"""Integrity-checked downloads with a local (md5, length) keyed cache."""
from __future__ import annotations

import hashlib
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Optional

from gridflow.client import EngineClient
from gridflow.jobs.base import IntegrityError
from gridflow.model import FileMeta

log = logging.getLogger(__name__)


def file_md5(path: os.PathLike) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


class FileCache:
    """Files stored as ``<md5>_<length>``; a hit needs both to match."""

    def __init__(self, root: os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, md5: str, length: int) -> Path:
        return self.root / f"{md5}_{length}"

    def get(self, md5: str, length: int) -> Optional[Path]:
        path = self._path(md5, length)
        if not path.is_file():
            return None
        if path.stat().st_size != length or file_md5(path) != md5:
            log.warning("evicting corrupt cache entry %s", path.name)
            path.unlink()
            return None
        return path

    def put(self, source: os.PathLike, md5: str, length: int):
        target = self._path(md5, length)
        if target.exists():
            return
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".put-")
        os.close(fd)
        shutil.copyfile(source, tmp)
        os.replace(tmp, target)


def fetch_with_integrity(
    api: EngineClient, meta: FileMeta, dest_dir: os.PathLike, cache: Optional[FileCache] = None
) -> Path:
    """Place ``meta`` in ``dest_dir``; cache first, then download and verify.

    Missing md5/length are looked up from the server index; if the server has
    none either the file is accepted unverified.
    """
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    dest = dest_dir / meta.file_name
    md5, length = meta.md5, meta.length
    if md5 is None or length is None:
        indexed = api.head(meta.server_dir, meta.file_name)
        md5 = md5 or indexed.md5
        length = length if length is not None else indexed.length

    if cache is not None and md5 is not None and length is not None:
        hit = cache.get(md5, length)
        if hit is not None:
            shutil.copyfile(hit, dest)
            return dest

    fd, tmp = tempfile.mkstemp(dir=dest_dir, prefix=".download-")
    try:
        with os.fdopen(fd, "wb") as out:
            api.download(meta.server_dir, meta.file_name, out)
        size = os.path.getsize(tmp)
        if length is not None and size != length:
            raise IntegrityError(f"{meta.file_name}: length {size} != {length}")
        actual = file_md5(tmp)
        if md5 is not None and actual != md5:
            raise IntegrityError(f"{meta.file_name}: md5 {actual} != {md5}")
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    if cache is not None:
        cache.put(dest, actual, size)
    return dest
