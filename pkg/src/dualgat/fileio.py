"""On-disk formats shared by the CLI.

Arrays are stored as a single-line JSON header terminated by ``\\n`` followed by
a flat little-endian payload.  All writers go through :func:`atomic_write` so an
interrupted run never leaves a truncated artifact behind.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8", "uint8": "u1"}


class FormatError(ValueError):
    pass


def atomic_write(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def write_json(path, obj) -> None:
    atomic_write(path, dump_json(obj))


def read_json(path):
    with open(path, "rb") as fh:
        return json.load(fh)


def encode_array(header: dict, array: np.ndarray) -> bytes:
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    head = dict(header)
    head["shape"] = [int(n) for n in array.shape]
    line = json.dumps(head, sort_keys=True, separators=(",", ":"))
    body = np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes()
    return line.encode() + b"\n" + body


def decode_array(blob: bytes) -> tuple[dict, np.ndarray]:
    nl = blob.find(b"\n")
    if nl < 0:
        raise FormatError("missing JSON header line")
    try:
        header = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc}") from None
    for key in ("kind", "shape", "dtype"):
        if key not in header:
            raise FormatError(f"header lacks {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unsupported dtype {header['dtype']!r}")
    shape = tuple(int(n) for n in header["shape"])
    dt = np.dtype(_DTYPES[header["dtype"]])
    body = blob[nl + 1:]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(body) != expected:
        raise FormatError(f"payload has {len(body)} bytes, header implies {expected}")
    arr = np.frombuffer(body, dtype=dt).reshape(shape)
    return header, arr.astype(dt.newbyteorder("="), copy=True)


def write_array(path, header: dict, array: np.ndarray) -> None:
    atomic_write(path, encode_array(header, array))


def read_array(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_array(fh.read())
