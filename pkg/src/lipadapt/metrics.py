"""Append-only JSONL metrics stream with deterministic serialisation.

Records carry no timestamps and are written with sorted keys and fixed
separators, so reruns of the same seeded pipeline produce byte-identical
files.
"""

from __future__ import annotations

import json
import os


def encode_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class MetricsWriter:
    """Appends one JSON object per line to ``path`` and keeps them in memory."""

    def __init__(self, path: str | None):
        self.path = path
        self.records: list[dict] = []
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(encode_record(record) + "\n")

    def event(self, name: str, **fields) -> None:
        self.append({"event": name, **fields})


def round_floats(value, digits: int = 6):
    """Round floats recursively; keeps logged records stable and compact."""
    if isinstance(value, float):
        return round(value, digits)
    if isinstance(value, dict):
        return {k: round_floats(v, digits) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_floats(v, digits) for v in value]
    return value
