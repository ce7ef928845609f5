"""Server configuration.

The config file is plain ``key = value`` lines, ``#`` starts a comment::

    port = 8180
    host = 127.0.0.1
    repository = /srv/gridflow/files
    store = /srv/gridflow/engine.db
    sleep_min = 60
    sleep_max = 300
    max_retries = 1
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from typing import Optional


@dataclass
class ServerConfig:
    port: int = 8180
    host: str = "127.0.0.1"
    repository: str = "repository"
    store: str = "engine.db"
    sleep_min: float = 60
    sleep_max: float = 300
    max_retries: int = 1
    seed: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.sleep_min <= self.sleep_max:
            raise ValueError(f"bad sleep bounds {self.sleep_min}..{self.sleep_max}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    @classmethod
    def from_text(cls, text: str) -> "ServerConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
        parser.read_string("[server]\n" + text)
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in parser["server"].items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key in ("port", "max_retries", "seed"):
                kwargs[key] = int(raw)
            elif key in ("sleep_min", "sleep_max"):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str) -> "ServerConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"
