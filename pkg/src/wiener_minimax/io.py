"""Deterministic JSON / CSV writers and versioned readers.

Floats are written with 17 significant digits so a re-run reproduces every
byte.  JSON outputs carry ``schema_version``; readers reject unknown major
versions.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

__all__ = [
    "SCHEMA_VERSION",
    "SchemaError",
    "fmt_float",
    "dumps",
    "write_json",
    "write_csv",
    "read_json",
    "read_csv",
    "check_schema",
]

SCHEMA_VERSION = "1.0"


class SchemaError(ValueError):
    """Document with a missing or unsupported schema version."""


def fmt_float(x: float) -> str:
    return format(float(x), ".17g")


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj)
    return obj


def _encode(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return fmt_float(obj) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [pad + json.dumps(k) + ": " + _encode(v, indent, level + 1) for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON text with 17-significant-digit floats and non-finite values as null."""
    return _encode(_plain(obj), indent, 0) + "\n"


def write_json(path, obj: dict) -> Path:
    doc = {"schema_version": SCHEMA_VERSION}
    doc.update(obj)
    path = Path(path)
    path.write_text(dumps(doc), encoding="utf-8", newline="\n")
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[float]]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def check_schema(doc: dict) -> dict:
    version = doc.get("schema_version")
    if version is None:
        raise SchemaError("document has no schema_version")
    major = str(version).split(".")[0]
    if major != SCHEMA_VERSION.split(".")[0]:
        raise SchemaError(f"unsupported schema_version {version!r}")
    return doc


def read_json(path) -> dict:
    """Read a JSON output written by this package, checking its schema version."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise SchemaError("top-level JSON value must be an object")
    return check_schema(doc)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("empty CSV file")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, data
