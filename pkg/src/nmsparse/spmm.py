"""Compressed N:M activations and a correctness-first sparse-dense matmul.

The compressed form stores, for every group of ``m`` logical columns, the
``n`` kept values plus their within-group positions (one byte each, strictly
increasing).  The kernel multiplies only the kept entries, in ascending
logical-column order with float64 accumulation, so its output is bit
identical to the dense reference applied to the decompressed tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PatternError, ShapeError, ValidationError
from .masking import NMMask, NMPattern
from .tensor_core import as_f32_2d

__all__ = ["CompressedNM", "compress", "decompress", "spmm", "flop_report"]


@dataclass(frozen=True)
class CompressedNM:
    """N:M-compressed activation block: values and within-group indices."""

    pattern: NMPattern
    logical_cols: int
    values: np.ndarray  # rows x (logical_cols * n / m), float32
    indices: np.ndarray  # same shape, uint8, each in [0, m)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        idx = np.ascontiguousarray(self.indices, dtype=np.uint8)
        if v.ndim != 2 or idx.shape != v.shape:
            raise ShapeError("values and indices must be matching 2-D arrays")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "indices", idx)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def kept_cols(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        n, m = self.pattern.n, self.pattern.m
        if self.logical_cols % m != 0:
            raise ValidationError(
                f"logical cols {self.logical_cols} not divisible by m={m}"
            )
        if self.kept_cols != self.logical_cols // m * n:
            raise ValidationError("kept column count disagrees with the pattern")
        if self.rows == 0 or self.kept_cols == 0:
            return
        grouped = self.indices.reshape(self.rows, -1, n)
        if grouped.max() >= m:
            raise ValidationError(f"index {int(grouped.max())} outside group size {m}")
        if n > 1 and not (np.diff(grouped.astype(np.int16), axis=2) > 0).all():
            raise ValidationError("indices not strictly increasing within a group")

    def logical_columns(self) -> np.ndarray:
        """Absolute column index of every stored slot."""
        n, m = self.pattern.n, self.pattern.m
        group = np.repeat(np.arange(self.logical_cols // m), n)
        return group[None, :] * m + self.indices.astype(np.int64)


def compress(x_sparse, pattern: NMPattern, mask: NMMask | None = None) -> CompressedNM:
    """Encode a pattern-conforming tensor; lossless against the masked input.

    Without a mask the kept slots are the nonzero positions, padded with the
    lowest-index zeros when a group holds fewer than ``n`` nonzeros.  With a
    mask the recorded slots are exactly the mask's, so kept zeros stay
    distinguishable.
    """
    x = as_f32_2d(x_sparse, "x_sparse")
    n, m = pattern.n, pattern.m
    if x.shape[1] % m != 0:
        raise ShapeError(f"cols {x.shape[1]} not divisible by m={m}")
    rows, cols = x.shape
    groups = cols // m
    if mask is not None:
        if mask.keep.shape != x.shape:
            raise ShapeError(f"mask {mask.keep.shape} vs tensor {x.shape}")
        if mask.pattern != pattern:
            raise PatternError(f"mask pattern {mask.pattern} != {pattern}")
        mask.validate()
        if (x[~mask.keep] != 0.0).any():
            raise PatternError("nonzero element outside the mask")
        keep = mask.keep.reshape(rows, groups, m)
        slot_idx = np.argsort(~keep, axis=2, kind="stable")[:, :, :n]
    else:
        nonzero = (x != 0.0).reshape(rows, groups, m)
        if (nonzero.sum(axis=2) > n).any():
            raise PatternError(f"group with more than {n} nonzeros and no mask given")
        # Nonzeros first (in column order), then the lowest-index zeros.
        slot_idx = np.argsort(~nonzero, axis=2, kind="stable")[:, :, :n]
    slot_idx = np.sort(slot_idx, axis=2)
    grouped_x = x.reshape(rows, groups, m)
    values = np.take_along_axis(grouped_x, slot_idx, axis=2).reshape(rows, groups * n)
    indices = slot_idx.astype(np.uint8).reshape(rows, groups * n)
    return CompressedNM(pattern, cols, values, indices)


def decompress(c: CompressedNM) -> np.ndarray:
    """Dense float32 tensor with zeros at the pruned positions."""
    c.validate()
    out = np.zeros((c.rows, c.logical_cols), dtype=np.float32)
    if c.rows == 0 or c.kept_cols == 0:
        return out
    cols = c.logical_columns()
    np.put_along_axis(out, cols, c.values, axis=1)
    return out


def spmm(c: CompressedNM, w) -> np.ndarray:
    """Sparse-dense product touching only the kept entries.

    Accumulates per row over kept slots in ascending logical order (float64),
    mirroring the dense kernel's ascending-k reduction, so the result matches
    ``matmul(decompress(c), w)`` bit for bit.
    """
    c.validate()
    w = as_f32_2d(w, "w")
    if c.logical_cols != w.shape[0]:
        raise ShapeError(
            f"compressed cols {c.logical_cols} != weight input dim {w.shape[0]}"
        )
    w64 = w.astype(np.float64)
    v64 = c.values.astype(np.float64)
    cols = c.logical_columns()
    acc = np.zeros((c.rows, w.shape[1]), dtype=np.float64)
    for s in range(c.kept_cols):
        acc += v64[:, s : s + 1] * w64[cols[:, s], :]
    return acc.astype(np.float32)


def flop_report(c: CompressedNM, w) -> dict:
    """Multiply-accumulate counts for the dense and sparse kernels."""
    w = as_f32_2d(w, "w")
    if c.logical_cols != w.shape[0]:
        raise ShapeError(
            f"compressed cols {c.logical_cols} != weight input dim {w.shape[0]}"
        )
    dense = c.rows * c.logical_cols * w.shape[1]
    sparse = c.rows * c.kept_cols * w.shape[1]
    return {
        "dense_macs": dense,
        "sparse_macs": sparse,
        "ratio": c.pattern.n / c.pattern.m,
    }
