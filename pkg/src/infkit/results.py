"""
Result artifacts: one JSON document per run plus flat CSVs, all written
atomically (temp file in the target directory, then rename).
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import _atomic_write
from .metrics import MetricsReport

TRACE_COLUMNS = ("step", "test_loss", "test_acc", "self_loss", "self_acc", "f1")


def _plain(obj):
    """JSON fallback for numpy scalars and arrays."""
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_plain, allow_nan=True) + "\n"


def write_json(path, doc: dict):
    _atomic_write(Path(path), dumps(doc).encode())


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header: Sequence[str], rows):
    _atomic_write(Path(path), rows_to_csv(header, rows).encode())


def write_text(path, text: str):
    _atomic_write(Path(path), text.encode())


def trace_rows(trace: Sequence[MetricsReport | dict]):
    for rep in trace:
        d = rep if isinstance(rep, dict) else rep.to_dict()
        yield [d.get(c) for c in TRACE_COLUMNS]


def histogram_rows(trace: Sequence[MetricsReport | dict]):
    """``step,class,count`` for every recorded histogram."""
    for rep in trace:
        d = rep if isinstance(rep, dict) else rep.to_dict()
        for cls, count in enumerate(d.get("histogram") or []):
            yield [d["step"], cls, count]


def write_trace_csvs(out_dir, stem: str, trace) -> list[Path]:
    """``<stem>_trace.csv`` and, when any histogram exists, ``<stem>_histogram.csv``."""
    out_dir = Path(out_dir)
    paths = [out_dir / f"{stem}_trace.csv"]
    write_csv(paths[0], TRACE_COLUMNS, trace_rows(trace))
    hist = list(histogram_rows(trace))
    if hist:
        paths.append(out_dir / f"{stem}_histogram.csv")
        write_csv(paths[1], ("step", "class", "count"), hist)
    return paths
