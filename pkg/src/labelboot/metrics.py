"""Crash-tolerant JSONL metrics stream (one record per logging step)."""

from __future__ import annotations

import json
import time
from pathlib import Path


class MetricsLogger:
    """Appends one JSON object per line; flushes every write."""

    def __init__(self, path: str | Path | None):
        self._fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")
        self.last: dict | None = None

    def log(self, **record) -> None:
        record.setdefault("time", time.time())
        self.last = record
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "MetricsLogger":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
