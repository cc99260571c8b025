"""Bit-exact binary tensor container, CSV emission, and heatmap images.

Container layout (all integers little-endian, no padding)::

    magic    4 bytes  "NMT1"
    dtype    1 byte   0 = float32, 1 = int8, 2 = uint8
    flags    1 byte   bit 0: compressed N:M payload
                      bits 1-2: scoring-factor kind (0 none, 1 plain, 2 robust)
    rank     1 byte   always 2
    reserved 1 byte   zero
    rows     8 bytes  unsigned
    cols     8 bytes  unsigned
    [n, m    1 byte each, compressed payloads only]
    payload  dense: rows*cols elements, row-major
             compressed: float32 values block, then uint8 indices block

One tensor per file.  Heatmaps are binary PGM (absolute magnitudes) or PPM
(signed: gray-to-black for negative, red for positive), normalized by the
tensor's absolute maximum so output is invariant to positive rescaling.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, LengthError, ShapeError, ValidationError
from .masking import NMPattern
from .scoring import ScoringFactors
from .spmm import CompressedNM
from .tensor_core import as_f32_2d

__all__ = [
    "MAGIC",
    "write_tensor",
    "read_tensor",
    "emit_heatmap",
    "write_csv",
    "fmt_float",
]

MAGIC = b"NMT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("u1")}
_FLAG_COMPRESSED = 0x01
_KIND_SHIFT = 1
_KIND_CODES = {"plain": 1, "robust": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_HEADER = struct.Struct("<4sBBBBQQ")


def _header_bytes(dtype: int, flags: int, rows: int, cols: int) -> bytes:
    return _HEADER.pack(MAGIC, dtype, flags, 2, 0, rows, cols)


def write_tensor(path, obj) -> None:
    """Serialize a dense tensor, scoring factors, or compressed block."""
    if isinstance(obj, CompressedNM):
        obj.validate()
        blob = _header_bytes(0, _FLAG_COMPRESSED, obj.rows, obj.logical_cols)
        blob += bytes([obj.pattern.n, obj.pattern.m])
        blob += np.ascontiguousarray(obj.values, dtype="<f4").tobytes()
        blob += np.ascontiguousarray(obj.indices, dtype="u1").tobytes()
    elif isinstance(obj, ScoringFactors):
        flags = _KIND_CODES[obj.kind] << _KIND_SHIFT
        blob = _header_bytes(0, flags, 1, len(obj))
        blob += np.ascontiguousarray(obj.values, dtype="<f4").tobytes()
    else:
        arr = np.asarray(obj)
        if arr.ndim != 2:
            raise ShapeError("only 2-D tensors are serializable")
        if arr.dtype == np.int8:
            code, wire = 1, "i1"
        elif arr.dtype == np.uint8:
            code, wire = 2, "u1"
        else:
            arr = as_f32_2d(arr)
            code, wire = 0, "<f4"
        blob = _header_bytes(code, 0, arr.shape[0], arr.shape[1])
        blob += np.ascontiguousarray(arr, dtype=wire).tobytes()
    Path(path).write_bytes(blob)


def _parse_header(data: bytes, path) -> tuple:
    if len(data) < _HEADER.size:
        raise LengthError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, dtype, flags, rank, reserved, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {dtype}")
    if rank != 2:
        raise FormatError(f"{path}: unsupported rank {rank}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved byte is {reserved}")
    if flags >> 3:
        raise FormatError(f"{path}: unknown flag bits 0x{flags:02x}")
    return dtype, flags, rows, cols


def read_tensor(path):
    """Inverse of ``write_tensor``; validates structure and finiteness."""
    data = Path(path).read_bytes()
    dtype, flags, rows, cols = _parse_header(data, path)
    compressed = bool(flags & _FLAG_COMPRESSED)
    kind_code = (flags >> _KIND_SHIFT) & 0x3
    if kind_code == 3:
        raise FormatError(f"{path}: unknown factor kind code 3")
    if compressed and kind_code:
        raise FormatError(f"{path}: compressed and factor flags both set")
    if kind_code and dtype != 0:
        raise FormatError(f"{path}: factors must be float32")
    offset = _HEADER.size

    if compressed:
        if dtype != 0:
            raise FormatError(f"{path}: compressed payload must be float32")
        if len(data) < offset + 2:
            raise LengthError(f"{path}: truncated compressed header")
        n, m = data[offset], data[offset + 1]
        offset += 2
        if not 1 <= n <= m:
            raise FormatError(f"{path}: invalid pattern {n}:{m}")
        if m == 0 or cols % m != 0:
            raise ValidationError(f"{path}: cols {cols} not divisible by m={m}")
        kept = cols // m * n
        value_bytes = rows * kept * 4
        index_bytes = rows * kept
        if len(data) != offset + value_bytes + index_bytes:
            raise LengthError(
                f"{path}: payload is {len(data) - offset} bytes, "
                f"expected {value_bytes + index_bytes}"
            )
        values = (
            np.frombuffer(data, "<f4", rows * kept, offset).reshape(rows, kept).copy()
        )
        indices = (
            np.frombuffer(data, "u1", rows * kept, offset + value_bytes)
            .reshape(rows, kept)
            .copy()
        )
        if values.size and not np.isfinite(values).all():
            raise ValidationError(f"{path}: non-finite float32 payload")
        block = CompressedNM(NMPattern(n, m), cols, values, indices)
        try:
            block.validate()
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from None
        return block

    expected = rows * cols * _DTYPE_CODES[dtype].itemsize
    if len(data) != offset + expected:
        raise LengthError(
            f"{path}: payload is {len(data) - offset} bytes, expected {expected}"
        )
    arr = (
        np.frombuffer(data, _DTYPE_CODES[dtype], rows * cols, offset)
        .reshape(rows, cols)
        .copy()
    )
    if dtype == 0:
        if arr.size and not np.isfinite(arr).all():
            raise ValidationError(f"{path}: non-finite float32 payload")
        if kind_code:
            if rows != 1:
                raise FormatError(f"{path}: factors must be a 1-row tensor")
            return ScoringFactors(arr.ravel(), _KIND_NAMES[kind_code])
        return arr.astype(np.float32)
    return arr


def emit_heatmap(x, path, mode: str) -> None:
    """Write a PGM/PPM heatmap; darker pixels mark larger magnitudes.

    ``abs_gray``: grayscale of |x| / max|x|.  ``signed``: negative values run
    white-to-black, positive values white-to-red.  An all-zero tensor emits a
    fully white image.
    """
    x = as_f32_2d(x, "x")
    if x.size == 0:
        raise ShapeError("cannot render an empty tensor")
    x64 = x.astype(np.float64)
    peak = float(np.abs(x64).max())
    unit = np.zeros_like(x64) if peak == 0.0 else np.abs(x64) / peak
    level = np.rint(255.0 * unit).astype(np.uint8)
    rows, cols = x.shape
    if mode == "abs_gray":
        header = f"P5\n{cols} {rows}\n255\n".encode("ascii")
        payload = (255 - level).tobytes()
    elif mode == "signed":
        fade = (255 - level).astype(np.uint8)
        red = np.where(x64 >= 0.0, np.uint8(255), fade)
        rgb = np.stack([red, fade, fade], axis=2)
        header = f"P6\n{cols} {rows}\n255\n".encode("ascii")
        payload = rgb.tobytes()
    else:
        raise ShapeError(f"unknown heatmap mode {mode!r}")
    Path(path).write_bytes(header + payload)


def fmt_float(value: float) -> str:
    """Shortest round-trip decimal form; deterministic across runs."""
    return repr(float(value))


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """UTF-8 CSV with LF line endings and minimal RFC-4180 quoting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
