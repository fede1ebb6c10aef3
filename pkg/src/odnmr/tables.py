"""CSV tables with unit-annotated headers.

Headers look like ``tau (s)`` or ``value``; numbers are written with
``repr`` precision so a write/read cycle is lossless.
"""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

_HEADER = re.compile(r"^\s*(?P<name>[^()]+?)\s*(?:\((?P<unit>[^()]*)\))?\s*$")


def write_csv(path, columns: dict, units: dict | None = None) -> Path:
    """Write equal-length columns; ``units`` maps column names to unit labels."""
    units = units or {}
    names = list(columns)
    data = [np.asarray(columns[n]).reshape(-1) for n in names]
    if len({len(d) for d in data}) > 1:
        raise ValueError("columns have different lengths")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow([f"{n} ({units[n]})" if n in units else n for n in names])
        for row in zip(*data):
            w.writerow([_fmt(x) for x in row])
    return path


def _fmt(x):
    if isinstance(x, (str, np.str_)):
        return str(x)
    return repr(float(x))


def read_csv(path) -> tuple[dict, dict]:
    """Return ``(columns, units)`` with float arrays keyed by bare column name."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    names, units = [], {}
    for h in rows[0]:
        m = _HEADER.match(h)
        if m is None:
            raise ValueError(f"{path}: bad header cell {h!r}")
        names.append(m["name"])
        if m["unit"] is not None:
            units[m["name"]] = m["unit"]
    body = np.array(rows[1:], dtype=float).reshape(-1, len(names))
    return {n: body[:, i] for i, n in enumerate(names)}, units


def write_json_table(path, columns: dict, units: dict | None = None) -> Path:
    """JSON counterpart of :func:`write_csv`: ``{"columns": ..., "units": ...}``."""
    # NaN has no JSON literal; it is stored as null
    data = {n: [float(x) if np.isfinite(x) else None for x in np.asarray(v, dtype=float).reshape(-1)]
            for n, v in columns.items()}
    if len({len(v) for v in data.values()}) > 1:
        raise ValueError("columns have different lengths")
    doc = {"columns": data, "order": list(columns), "units": dict(units or {})}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")
    return path


def read_table(path) -> tuple[dict, dict]:
    """Read a table written by either :func:`write_csv` or :func:`write_json_table`."""
    path = Path(path)
    if path.suffix.lower() != ".json":
        return read_csv(path)
    doc = json.loads(path.read_text())
    try:
        cols = {n: np.array([np.nan if x is None else x for x in doc["columns"][n]], dtype=float) for n in doc["order"]}
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: not a table document ({exc})") from None
    return cols, dict(doc.get("units", {}))
