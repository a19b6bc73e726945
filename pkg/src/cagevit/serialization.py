"""TNSR binary tensors and manifest-indexed parameter directories.

TNSR layout (all integers little-endian)::

    b"TNSR" | version u8 (=1) | dtype u8 (1=f32, 2=f64) | ndim u32 | ndim x u64 dims | payload

A parameter directory holds one TNSR file per named tensor plus
``manifest.txt`` with one ``name file shape`` line per entry, shape written
as ``AxBxC``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError
from .tensor import Tensor

MAGIC = b"TNSR"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
MANIFEST = "manifest.txt"


def encode_tnsr(x) -> bytes:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _DTYPE_CODES:
        raise ContractError(f"TNSR stores float32 or float64, got {arr.dtype}")
    if arr.ndim == 0:
        raise ContractError("TNSR cannot store a zero-dimensional tensor")
    code = _DTYPE_CODES[arr.dtype]
    head = MAGIC + bytes([VERSION, code]) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()


def decode_tnsr(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TNSR record starting at ``offset``.

    Returns the array and the offset just past its payload, so records can
    be embedded back to back in larger files.
    """
    buf = memoryview(buf)
    if bytes(buf[offset : offset + 4]) != MAGIC:
        raise ParseError("bad TNSR magic", offset)
    if len(buf) < offset + 10:
        raise ParseError("truncated TNSR header", len(buf))
    version, code = buf[offset + 4], buf[offset + 5]
    if version != VERSION:
        raise ParseError(f"unsupported TNSR version {version}", offset + 4)
    if code not in _CODE_DTYPES:
        raise ParseError(f"unknown TNSR dtype code {code}", offset + 5)
    (ndim,) = struct.unpack_from("<I", buf, offset + 6)
    if ndim == 0:
        raise ParseError("TNSR ndim must be at least 1", offset + 6)
    pos = offset + 10
    if len(buf) < pos + 8 * ndim:
        raise ParseError(f"truncated TNSR shape ({ndim} dims)", len(buf))
    dims = struct.unpack_from(f"<{ndim}Q", buf, pos)
    for i, s in enumerate(dims):
        if s == 0:
            raise ParseError("TNSR dimension size is zero", pos + 8 * i)
    pos += 8 * ndim
    dtype = _CODE_DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise ParseError(f"truncated TNSR payload, need {nbytes} bytes", len(buf))
    arr = np.frombuffer(buf[pos : pos + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tnsr(path, x) -> None:
    Path(path).write_bytes(encode_tnsr(x))


def read_tnsr(path) -> Tensor:
    buf = Path(path).read_bytes()
    arr, end = decode_tnsr(buf)
    if end != len(buf):
        raise ParseError("trailing bytes after TNSR payload", end)
    return Tensor(arr)


def _safe_filename(name: str) -> str:
    return name.replace("/", "_") + ".tnsr"


def save_params(directory, params: dict, overwrite: bool = False) -> None:
    """Write ``name -> Tensor`` as TNSR files plus a manifest."""
    directory = Path(directory)
    if (directory / MANIFEST).exists() and not overwrite:
        raise FileExistsError(f"{directory} already holds a manifest; pass overwrite=True")
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, t in params.items():
        if any(c.isspace() for c in name):
            raise ContractError(f"parameter name {name!r} contains whitespace")
        fname = _safe_filename(name)
        write_tnsr(directory / fname, t)
        lines.append(f"{name} {fname} {'x'.join(str(s) for s in t.shape)}")
    tmp = directory / (MANIFEST + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / MANIFEST)


def load_params(directory) -> dict:
    directory = Path(directory)
    text = (directory / MANIFEST).read_text()
    params = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        fields = line.split()
        if fields:
            if len(fields) != 3:
                raise ParseError(f"manifest line needs 'name file shape': {line.strip()!r}", offset)
            name, fname, shape = fields
            t = read_tnsr(directory / fname)
            want = tuple(int(s) for s in shape.split("x"))
            if t.shape != want:
                raise ParseError(f"{fname}: shape {t.shape} disagrees with manifest {want}", offset)
            params[name] = t
        offset += len(line.encode())
    return params
