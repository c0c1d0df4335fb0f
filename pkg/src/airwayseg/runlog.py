"""Append-only JSON-lines event log."""
from __future__ import annotations

import json
import time
from pathlib import Path

from .errors import ParseError


class RunLog:
    """Records events in memory and, if a path is given, appends them to a JSON-lines file.

    Every record gets a sequence number ``seq`` (strictly increasing) and a
    wall-clock ``time``.
    """

    def __init__(self, path=None, echo=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        self.echo = echo
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def __call__(self, record: dict) -> dict:
        rec = {"seq": len(self.records), "time": round(time.time(), 3), **record}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, default=_jsonable) + "\n")
        if self.echo is not None:
            self.echo(rec)
        return rec

    def events(self, kind: str | None = None) -> list[dict]:
        return [r for r in self.records if kind is None or r.get("event") == kind]


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    if isinstance(v, (set, tuple)):
        return list(v)
    return str(v)


def read_log(path) -> list[dict]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {n}: {exc}", "log") from exc
    return out
