"""CSV artifacts with ``#`` metadata headers.

Numbers are written with 17 significant digits so that reading a file back
reproduces every float bit for bit; formatting never consults the locale.
"""
from __future__ import annotations

import csv
import io
import json
import math
from typing import Iterable, Sequence

import numpy as np

NEWLINE = "\r\n"


def format_number(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def render_csv(columns: Sequence[str], rows: Iterable[Sequence[float]], metadata: dict) -> str:
    buf = io.StringIO(newline="")
    for key, value in metadata.items():
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True, default=_jsonable)}{NEWLINE}")
    writer = csv.writer(buf, lineterminator=NEWLINE)
    writer.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} values, expected {len(columns)}")
        writer.writerow([format_number(v) for v in row])
    return buf.getvalue()


def emit_csv(columns: Sequence[str], rows, path, metadata: dict | None = None) -> None:
    """Write an RFC 4180 CSV with ``# key: json`` metadata lines above the header."""
    text = render_csv(columns, rows, metadata or {})
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_csv(path):
    """Return ``(metadata, columns, data)`` with ``data`` of shape (rows, columns)."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return parse_csv(text)


def parse_csv(text: str):
    metadata = {}
    body = []
    for line in text.splitlines(keepends=True):
        if line.startswith("#") and not body:
            key, _, value = line[1:].strip().partition(": ")
            metadata[key] = json.loads(value)
        else:
            body.append(line)
    reader = csv.reader(body)
    rows = list(reader)
    if not rows:
        return metadata, [], np.zeros((0, 0))
    columns = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return metadata, columns, data.reshape(len(rows) - 1, len(columns))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")
