"""File formats: the binary sample container, CSV tables, canonical JSON and a
reproducible .npz writer."""
from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import struct
import zipfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import ComplexTrace
from .errors import ParameterError

MAGIC = b"CVQK"
VERSION = 1
HEADER = struct.Struct("<4sId")


def write_samples(path, trace: ComplexTrace) -> None:
    """16-byte header (magic, u32 version, f64 sample rate) then interleaved
    little-endian float32 re/im pairs.  The length follows from the file size."""
    buf = np.empty(2 * len(trace), dtype="<f4")
    buf[0::2] = trace.samples.real
    buf[1::2] = trace.samples.imag
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, float(trace.sample_rate)))
        fh.write(buf.tobytes())


def read_samples(path) -> ComplexTrace:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ParameterError("file too short for a sample header")
    magic, version, fs = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ParameterError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ParameterError(f"unsupported sample file version {version}")
    body = raw[HEADER.size:]
    if len(body) % 8:
        raise ParameterError("sample payload is not a whole number of re/im pairs")
    buf = np.frombuffer(body, dtype="<f4")
    return ComplexTrace((buf[0::2] + 1j * buf[1::2]).astype(np.complex128), fs)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], columns: Sequence[Iterable]) -> None:
    """Column-wise CSV with shortest round-trip float formatting."""
    cols = [list(c) for c in columns]
    if len({len(c) for c in cols}) > 1:
        raise ParameterError("CSV columns differ in length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in zip(*cols):
            w.writerow([_fmt(v) for v in row])


def write_numeric_csv(path, header: Sequence[str], columns: Sequence[np.ndarray]) -> None:
    """Fast path for long numeric tables (17 significant digits)."""
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=",".join(header), comments="")


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    out = {}
    for i, name in enumerate(header):
        vals = [r[i] for r in body]
        try:
            out[name] = np.array([float(v) for v in vals])
        except ValueError:
            out[name] = np.array(vals)
    return out


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if np.isnan(f):
            return "nan"
        if np.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_npz(path, **arrays) -> None:
    """Like numpy.savez but with fixed member timestamps, so equal inputs give
    equal bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in sorted(arrays.items()):
            buf = _io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
