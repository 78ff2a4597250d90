"""Atomic, schema-versioned file I/O used by every artifact writer.

Writers go through a temp-then-rename so a failed run never leaves a partial
primary artifact behind. JSON documents carry a "schema" tag checked on load.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

__all__ = [
    "SchemaError",
    "write_text_atomic",
    "write_json_atomic",
    "write_csv_atomic",
    "read_json_checked",
]


class SchemaError(ValueError):
    """An artifact's schema tag does not match what the reader expects."""


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def write_json_atomic(path, doc: dict) -> None:
    write_text_atomic(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_csv_atomic(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")


def read_json_checked(path, schema: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    found = doc.get("schema")
    if found != schema:
        raise SchemaError(f"{path}: expected schema {schema!r}, found {found!r}")
    return doc
