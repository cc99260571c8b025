"""Symmetric INT8 quantization with channel smoothing.

Activations quantize per tensor, weights per channel (one scale per output
column), both symmetric around zero with the range clipped to [-127, 127]
so the sign is balanced.  Channel smoothing rescales activation columns by
1/s and weight rows by s, which leaves the product unchanged in exact
arithmetic; the inverted variant (reciprocal scales, small alpha) widens
the activation range instead of compressing it, which sharpens sparsity
selection before quantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DomainError, ParamsError, ShapeError
from .tensor_core import as_f32_2d

__all__ = [
    "QuantParams",
    "SmoothScales",
    "calibrate_smooth_scales",
    "apply_smoothing",
    "quantize",
    "dequantize",
    "w8a8_linear",
    "quantize_call_count",
]

QMAX = 127

# Counts quantize() invocations; lets tests assert that sparsity-only
# pipelines never touch the quantizer.
_QUANTIZE_CALLS = 0


def quantize_call_count() -> int:
    return _QUANTIZE_CALLS


@dataclass(frozen=True)
class QuantParams:
    """Scales for symmetric INT8: one float (per tensor) or one per column."""

    scheme: str
    scales: np.ndarray

    def __post_init__(self):
        if self.scheme not in ("per_tensor", "per_channel"):
            raise DomainError(f"unknown quantization scheme {self.scheme!r}")
        s = np.atleast_1d(np.asarray(self.scales, dtype=np.float64))
        if self.scheme == "per_tensor" and s.size != 1:
            raise ParamsError("per-tensor params need exactly one scale")
        object.__setattr__(self, "scales", s)

    def check_positive(self) -> None:
        if not (self.scales > 0).all():
            raise ParamsError("quantization scales must be positive")


@dataclass(frozen=True)
class SmoothScales:
    """Per-channel smoothing scales; ``inverted`` stores the reciprocal form."""

    s: np.ndarray
    alpha: float
    inverted: bool

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64).ravel()
        if s.size == 0 or not (s > 0).all():
            raise ParamsError("smoothing scales must be positive")
        object.__setattr__(self, "s", s)


def calibrate_smooth_scales(
    x_calib, w, alpha: float, inverted: bool = False
) -> SmoothScales:
    """Channel scales from column-wise absolute maxima of activations and weights.

    ``s_j = max|X[:, j]|^alpha / max|W[j, :]|^(1 - alpha)``; the inverted form
    returns the elementwise reciprocal.
    """
    x_calib = as_f32_2d(x_calib, "x_calib")
    w = as_f32_2d(w, "w")
    if x_calib.shape[1] != w.shape[0]:
        raise ShapeError(
            f"calibration cols {x_calib.shape[1]} != weight input dim {w.shape[0]}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha {alpha} outside [0, 1]")
    x_max = np.abs(x_calib.astype(np.float64)).max(axis=0)
    w_max = np.abs(w.astype(np.float64)).max(axis=1)
    for j in range(x_max.size):
        if x_max[j] == 0.0:
            raise CalibrationError(f"activation channel {j} has zero maximum")
        if w_max[j] == 0.0:
            raise CalibrationError(f"weight channel {j} has zero maximum")
    s = np.power(x_max, alpha) / np.power(w_max, 1.0 - alpha)
    if inverted:
        s = 1.0 / s
    return SmoothScales(s, alpha, inverted)


def apply_smoothing(x, w, scales: SmoothScales) -> tuple[np.ndarray, np.ndarray]:
    """Rescale ``x`` columns by 1/s and ``w`` rows by s; the product is preserved."""
    x = as_f32_2d(x, "x")
    w = as_f32_2d(w, "w")
    if x.shape[1] != w.shape[0] or scales.s.size != w.shape[0]:
        raise ShapeError(
            f"smoothing dims disagree: x {x.shape}, w {w.shape}, s {scales.s.size}"
        )
    x_out = (x.astype(np.float64) / scales.s[None, :]).astype(np.float32)
    w_out = (w.astype(np.float64) * scales.s[:, None]).astype(np.float32)
    return x_out, w_out


def quantize(t, scheme: str) -> tuple[np.ndarray, QuantParams]:
    """Symmetric round-half-to-even quantization to int8 in [-127, 127].

    Scales come from the absolute maximum (whole tensor or per column); an
    all-zero tensor or column gets scale 1.0 by convention.
    """
    global _QUANTIZE_CALLS
    _QUANTIZE_CALLS += 1
    t = as_f32_2d(t, "t")
    t64 = t.astype(np.float64)
    if scheme == "per_tensor":
        peak = float(np.abs(t64).max()) if t.size else 0.0
        scales = np.array([peak / QMAX if peak > 0.0 else 1.0])
        divisor = scales[0]
    elif scheme == "per_channel":
        peaks = np.abs(t64).max(axis=0) if t.size else np.zeros(t.shape[1])
        scales = np.where(peaks > 0.0, peaks / QMAX, 1.0)
        divisor = scales[None, :]
    else:
        raise DomainError(f"unknown quantization scheme {scheme!r}")
    q = np.clip(np.rint(t64 / divisor), -QMAX, QMAX).astype(np.int8)
    return q, QuantParams(scheme, scales)


def dequantize(q, params: QuantParams) -> np.ndarray:
    """Map int8 codes back to float32 via the parameter scales."""
    params.check_positive()
    q = np.asarray(q)
    if q.ndim != 2:
        raise ShapeError("quantized tensor must be 2-D")
    q64 = q.astype(np.float64)
    if params.scheme == "per_tensor":
        out = q64 * params.scales[0]
    else:
        if params.scales.size != q.shape[1]:
            raise ParamsError(
                f"{params.scales.size} scales for {q.shape[1]} channels"
            )
        out = q64 * params.scales[None, :]
    return out.astype(np.float32)


def w8a8_linear(x, w, smooth: SmoothScales | None = None) -> np.ndarray:
    """Quantized linear reference: optional smoothing, INT8 matmul, dequant.

    Activations are quantized per tensor and weights per channel; the integer
    product accumulates exactly (int64) and is scaled back by the product of
    the two scales.
    """
    x = as_f32_2d(x, "x")
    w = as_f32_2d(w, "w")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {x.shape} @ {w.shape}")
    if smooth is not None:
        x, w = apply_smoothing(x, w, smooth)
    qx, px = quantize(x, "per_tensor")
    qw, pw = quantize(w, "per_channel")
    acc = qx.astype(np.int64) @ qw.astype(np.int64)
    out = (acc.astype(np.float64) * px.scales[0]) * pw.scales[None, :]
    return out.astype(np.float32)
