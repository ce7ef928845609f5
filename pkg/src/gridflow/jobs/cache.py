"""Stateful services: results stored under the md5 of their inputs.

An entry is a directory named by the 32-character key holding the outputs and
a manifest of their digests.  A corrupt entry is evicted and recomputed.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Callable, Sequence

from filelock import FileLock

MANIFEST = ".manifest.json"


def input_key(input_files: Sequence[os.PathLike]) -> str:
    digest = hashlib.md5()
    for path in input_files:
        path = Path(path)
        data = path.read_bytes()
        # name and length prefixes keep (a, bc) distinct from (ab, c)
        digest.update(path.name.encode() + b"\0" + str(len(data)).encode() + b"\0")
        digest.update(data)
    return digest.hexdigest()


def _digest(path: Path) -> str:
    return hashlib.md5(path.read_bytes()).hexdigest()


def _valid(entry: Path) -> bool:
    manifest = entry / MANIFEST
    if not manifest.is_file():
        return False
    try:
        expected = json.loads(manifest.read_text())
    except ValueError:
        return False
    for name, md5 in expected.items():
        f = entry / name
        if not f.is_file() or _digest(f) != md5:
            return False
    return True


def cached_call(
    service_id: str,
    input_files: Sequence[os.PathLike],
    compute: Callable[[Sequence[Path], Path], None],
    repository: os.PathLike,
) -> dict[str, Path]:
    """Return ``compute``'s outputs for these inputs, computing at most once.

    ``compute(inputs, out_dir)`` writes its output files into ``out_dir``.
    """
    root = Path(repository) / service_id
    root.mkdir(parents=True, exist_ok=True)
    key = input_key(input_files)
    entry = root / key
    with FileLock(str(root / f".{key}.lock")):
        if entry.is_dir() and not _valid(entry):
            shutil.rmtree(entry)
        if not entry.is_dir():
            tmp = Path(tempfile.mkdtemp(dir=root, prefix=".build-"))
            try:
                compute([Path(p) for p in input_files], tmp)
                manifest = {p.name: _digest(p) for p in sorted(tmp.iterdir()) if p.is_file()}
                (tmp / MANIFEST).write_text(json.dumps(manifest, sort_keys=True))
                os.replace(tmp, entry)
            except BaseException:
                shutil.rmtree(tmp, ignore_errors=True)
                raise
    return {p.name: p for p in sorted(entry.iterdir()) if p.name != MANIFEST}
