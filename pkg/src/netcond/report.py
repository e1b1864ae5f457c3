"""Report envelope shared by every command, in JSON or CSV form."""

from __future__ import annotations

import base64
import csv
import dataclasses
import io
import json
import math
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__


def encode_array(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(raw).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    raw = base64.b64decode(obj["data"], validate=True)
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return encode_array(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


def make_report(command: str, options: dict, seed, model_digest, records, summary=None) -> dict:
    return {
        "tool_version": __version__,
        "command": command,
        "options": _plain(options),
        "seed": seed,
        "model_digest": model_digest,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "summary": _plain(summary or {}),
        "records": _plain(records),
    }


def strip_volatile(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timestamp"}


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, dict) and "data" in v:
        return v["data"]
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else str(v)


def to_table(report: dict) -> str:
    """Flat CSV: ``#``-prefixed metadata lines, then one row per record."""
    buf = io.StringIO()
    for key in ("tool_version", "command", "seed", "model_digest", "timestamp"):
        buf.write(f"# {key}: {report.get(key)}\n")
    buf.write(f"# options: {json.dumps(report['options'], sort_keys=True)}\n")
    buf.write(f"# summary: {json.dumps(report['summary'], sort_keys=True)}\n")
    records = report["records"]
    if records:
        cols = list(records[0].keys())
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for rec in records:
            w.writerow([_cell(rec.get(c)) for c in cols])
    return buf.getvalue()


def to_structured(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True) + "\n"


def write_report(report: dict, path, fmt: str = "structured") -> None:
    text = to_table(report) if fmt == "table" else to_structured(report)
    Path(path).write_text(text, encoding="utf-8")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
