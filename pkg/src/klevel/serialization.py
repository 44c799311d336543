"""File formats: a columnar binary dataset file and CSV traces.

Dataset file layout (little-endian)::

    magic  b"KLVL"          4 bytes
    version                 uint16
    K                       uint16
    seed                    int64   (-1 when unknown)
    K x (n_k, width_k)      uint64 pairs
    level 1 payload, level 2 payload, ...   float64, row-major

CSV numbers use the shortest round-trip representation (``repr``) so a
rerun with the same inputs writes identical bytes. ``NaN`` is written as
an empty field.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct

import numpy as np

from .errors import InvalidInputError
from .problem import Dataset

MAGIC = b"KLVL"
VERSION = 1
_HEADER = struct.Struct("<4sHHq")
_LEVEL = struct.Struct("<QQ")


def save_dataset(path, data):
    seed = -1 if data.seed is None else int(data.seed)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, data.K, seed))
        for p in data.payloads:
            fh.write(_LEVEL.pack(*p.shape))
        for p in data.payloads:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_dataset(path, problem):
    """Read a dataset file; ``problem`` supplies the levels' samplers."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, version, K, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: not a dataset file")
    if version != VERSION:
        raise InvalidInputError(f"{path}: unsupported version {version}")
    if K != problem.K:
        raise InvalidInputError(f"{path}: file has K={K}, problem has K={problem.K}")
    off = _HEADER.size
    shapes = []
    for _ in range(K):
        shapes.append(_LEVEL.unpack_from(raw, off))
        off += _LEVEL.size
    payloads = []
    for n, w in shapes:
        count = n * w
        if off + 8 * count > len(raw):
            raise InvalidInputError(f"{path}: truncated payload")
        payloads.append(np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(n, w))
        off += 8 * count
    if off != len(raw):
        raise InvalidInputError(f"{path}: trailing bytes")
    data = Dataset(tuple(payloads), tuple(lvl.draw for lvl in problem.levels), None if seed < 0 else seed)
    problem.check_dataset(data)
    return data


def format_value(v):
    """CSV text for one cell."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return str(v)


def csv_text(rows, columns=None):
    """Render a list of dicts as CSV text with a header line."""
    if columns is None:
        columns = []
        for row in rows:
            for key in row:
                if key not in columns:
                    columns.append(key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns=None):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(csv_text(rows, columns))


def record_rows(record):
    """One dict per iteration of a :class:`~klevel.optimizers.RunRecord`."""
    K = record.var_u.shape[1]
    rows = []
    for i in range(record.T):
        row = {
            "t": int(record.t[i]),
            "train_loss": record.train_loss[i],
            "test_loss": record.test_loss[i],
            "x_norm": record.x_norm[i],
        }
        for k in range(K):
            row[f"var_u_{k + 1}"] = record.var_u[i, k]
        for k in range(K):
            row[f"var_v_{k + 1}"] = record.var_v[i, k]
        rows.append(row)
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_record(csv_path, record, json_path=None):
    """Write the trace CSV and, next to it, a JSON echo of the run config."""
    write_csv(csv_path, record_rows(record))
    if json_path is None:
        json_path = str(csv_path).rsplit(".", 1)[0] + ".json"
    dump_json(json_path, dict(record.config, seed=record.seed))
    return json_path
