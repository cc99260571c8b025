"""Dense 2-D tensor primitives.

Conventions used throughout the package:

* Tensors are row-major ``numpy`` arrays of ``float32``, 2-D only.
  Activations ``X`` are tokens x channels; weights ``W`` are stored as
  ``d_in x d_out`` so the product is always ``X @ W``.
* Storage is 32-bit, accumulation is 64-bit.  Reductions that feed
  bit-exactness contracts (``matmul``, ``input_channel_norms``) accumulate
  in a fixed ascending order so results are reproducible and match naive
  loop oracles bit for bit.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "as_f32_2d",
    "tensor2d",
    "matmul",
    "input_channel_norms",
    "percentile_nearest_rank",
    "mean_var",
    "seeded_uniform",
    "splitmix64_stream",
    "fnv1a64",
    "tensor_digest",
]

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def as_f32_2d(a, name: str = "tensor") -> np.ndarray:
    """Coerce array-like input to a C-contiguous float32 2-D array."""
    arr = np.ascontiguousarray(a, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got {arr.ndim}-D")
    return arr


def tensor2d(a) -> np.ndarray:
    """Build a float32 2-D tensor from array-like data, rejecting non-finite values."""
    arr = as_f32_2d(a)
    if arr.size and not np.isfinite(arr).all():
        raise DomainError("tensor contains NaN or Inf")
    return arr


def matmul(x, w) -> np.ndarray:
    """Dense product ``y[i][j] = sum_t x[i][t] * w[t][j]``.

    Accumulates in float64 over ascending ``t`` (one fused update per inner
    index), then rounds once to float32.  This matches an element-by-element
    triple-loop reference bit for bit, which is what the sparse kernel and
    the capture/replay tests compare against.
    """
    x = as_f32_2d(x, "x")
    w = as_f32_2d(w, "w")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {x.shape} @ {w.shape}")
    x64 = x.astype(np.float64)
    w64 = w.astype(np.float64)
    acc = np.zeros((x.shape[0], w.shape[1]), dtype=np.float64)
    tmp = np.empty_like(acc)
    for t in range(x.shape[1]):
        np.multiply(x64[:, t : t + 1], w64[t : t + 1, :], out=tmp)
        np.add(acc, tmp, out=acc)
    return acc.astype(np.float32)


def input_channel_norms(w) -> np.ndarray:
    """L2 norm over the output dimension for every input channel (row) of ``w``.

    Returns float64; accumulation runs ascending over the output index so the
    result equals an explicit loop reference exactly.
    """
    w = as_f32_2d(w, "w")
    if w.size == 0:
        raise ShapeError("weight tensor is empty")
    w64 = w.astype(np.float64)
    acc = np.zeros(w.shape[0], dtype=np.float64)
    for o in range(w.shape[1]):
        acc += w64[:, o] * w64[:, o]
    return np.sqrt(acc)


def percentile_nearest_rank(values, q: float) -> float:
    """Nearest-rank percentile: the element at 1-based rank ``ceil(q * n)``.

    ``q`` = 0 maps to the minimum (rank 1), ``q`` = 1 to the maximum.  The
    result is always an element of ``values``.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DomainError("percentile of an empty array")
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"percentile fraction {q} outside [0, 1]")
    rank = min(max(math.ceil(q * flat.size), 1), flat.size)
    return float(np.sort(flat)[rank - 1])


def mean_var(values) -> tuple[float, float]:
    """Population mean and variance (divide by n), 64-bit accumulation."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise DomainError("moments of an empty array")
    lo = flat.min()
    hi = flat.max()
    if lo == hi:
        # Constant input: variance is exactly zero, no rounding residue.
        return float(lo), 0.0
    mean = float(flat.sum() / flat.size)
    var = float(np.sum((flat - mean) ** 2) / flat.size)
    return mean, var


def _splitmix_mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def splitmix64_stream(seed: int, count: int) -> np.ndarray:
    """The i-th output is ``mix(seed + (i + 1) * 0x9E3779B97F4A7C15)`` mod 2^64.

    SplitMix64 finalizer over a golden-ratio counter; pure function of
    (seed, i), identical on every platform.
    """
    if not 0 <= seed < 2**64:
        raise DomainError(f"seed {seed} outside [0, 2^64)")
    idx = np.arange(1, count + 1, dtype=np.uint64)
    state = _U64(seed) + idx * _GOLDEN
    return _splitmix_mix(state)


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of a UTF-8 string; used to derive per-site seeds."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) % 2**64
    return h


def seeded_uniform(rows: int, cols: int, lo: float, hi: float, seed: int) -> np.ndarray:
    """Deterministic float32 tensor with entries uniform in ``[lo, hi)``.

    Values come from ``splitmix64_stream`` in row-major order; the top 53
    bits map each word to [0, 1).  The float32 rounding at the end is nudged
    back inside the half-open interval when it lands on a boundary.
    """
    if rows < 0 or cols < 0:
        raise DomainError("negative tensor shape")
    if not lo < hi:
        raise DomainError(f"empty range [{lo}, {hi})")
    words = splitmix64_stream(seed, rows * cols)
    unit = (words >> _U64(11)).astype(np.float64) * 2.0**-53
    out = (lo + unit * (hi - lo)).astype(np.float32)
    # float32 rounding can cross the [lo, hi) boundaries; clamp back inside.
    out64 = out.astype(np.float64)
    if (out64 >= hi).any():
        hi32 = np.float32(hi)
        if float(hi32) >= hi:
            hi32 = np.nextafter(hi32, np.float32(-np.inf))
        out[out64 >= hi] = hi32
    if (out64 < lo).any():
        lo32 = np.float32(lo)
        if float(lo32) < lo:
            lo32 = np.nextafter(lo32, np.float32(np.inf))
        out[out64 < lo] = lo32
    return out.reshape(rows, cols)


def tensor_digest(t) -> str:
    """SHA-256 over (rows, cols, row-major payload) of a float32 tensor."""
    t = as_f32_2d(t, "tensor")
    h = hashlib.sha256()
    h.update(int(t.shape[0]).to_bytes(8, "little"))
    h.update(int(t.shape[1]).to_bytes(8, "little"))
    h.update(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return h.hexdigest()
