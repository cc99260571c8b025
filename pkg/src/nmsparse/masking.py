"""N:M structured sparsity masks over activation rows.

Masks are recomputed per input (per token row); within every group of
``m`` consecutive channels exactly ``n`` elements survive.  Selection
ranks elements by a pluggable non-negative score; ties keep the lowest
column index so masks are reproducible.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .scoring import ScoringFactors
from .tensor_core import as_f32_2d, input_channel_norms

__all__ = [
    "NMPattern",
    "NMMask",
    "ScoreStrategy",
    "score_elements",
    "build_mask",
    "apply_mask",
    "sparsify",
    "sparsify_with_mask",
    "weight_nm_prune",
]

THREADS_ENV_VAR = "NM_SPARSIFY_THREADS"

STRATEGY_KINDS = ("naive_topk", "wanda_like", "robust_norm")


@dataclass(frozen=True)
class NMPattern:
    """Keep ``n`` of every ``m`` consecutive elements."""

    n: int
    m: int

    def __post_init__(self):
        if self.m < 1 or not 1 <= self.n <= self.m:
            raise DomainError(f"invalid pattern {self.n}:{self.m}")

    @classmethod
    def parse(cls, text: str) -> "NMPattern":
        parts = text.split(":")
        if len(parts) != 2:
            raise DomainError(f"pattern {text!r} is not of the form N:M")
        try:
            n, m = int(parts[0]), int(parts[1])
        except ValueError:
            raise DomainError(f"pattern {text!r} is not of the form N:M") from None
        if n < 1 or m < 1 or n > m:
            raise DomainError(f"pattern {text!r} needs two positive integers, N <= M")
        return cls(n, m)

    @property
    def ratio(self) -> float:
        return self.n / self.m

    @property
    def full_keep(self) -> bool:
        return self.n == self.m

    def __str__(self) -> str:
        return f"{self.n}:{self.m}"


@dataclass(frozen=True)
class NMMask:
    """Boolean keep mask whose every m-group has exactly n set bits."""

    keep: np.ndarray
    pattern: NMPattern

    def __post_init__(self):
        k = np.ascontiguousarray(self.keep, dtype=bool)
        if k.ndim != 2:
            raise ShapeError("mask must be 2-D")
        object.__setattr__(self, "keep", k)

    @property
    def rows(self) -> int:
        return self.keep.shape[0]

    @property
    def cols(self) -> int:
        return self.keep.shape[1]

    def validate(self) -> None:
        """Check the exactly-n-per-group invariant; raises on violation."""
        m, n = self.pattern.m, self.pattern.n
        if self.cols % m != 0:
            raise ShapeError(f"cols {self.cols} not divisible by m={m}")
        counts = self.keep.reshape(self.rows, -1, m).sum(axis=2)
        if not (counts == n).all():
            raise DomainError("mask group with popcount != n")


@dataclass(frozen=True)
class ScoreStrategy:
    """Scoring rule for mask selection: plain magnitude or factor-weighted."""

    kind: str
    factors: ScoringFactors | None = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise DomainError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "naive_topk" and self.factors is not None:
            raise DomainError("naive_topk takes no factors")
        if self.kind != "naive_topk" and self.factors is None:
            raise DomainError(f"{self.kind} requires scoring factors")

    @classmethod
    def naive_topk(cls) -> "ScoreStrategy":
        return cls("naive_topk")

    @classmethod
    def wanda_like(cls, factors: ScoringFactors) -> "ScoreStrategy":
        return cls("wanda_like", factors)

    @classmethod
    def robust_norm(cls, factors: ScoringFactors) -> "ScoreStrategy":
        return cls("robust_norm", factors)


def score_elements(x, strategy: ScoreStrategy) -> np.ndarray:
    """Non-negative per-element scores: |x| or |x| times the channel factor."""
    x = as_f32_2d(x, "x")
    if strategy.factors is None:
        return np.abs(x)
    if len(strategy.factors) != x.shape[1]:
        raise ShapeError(
            f"{len(strategy.factors)} factors for {x.shape[1]} activation columns"
        )
    f64 = strategy.factors.values.astype(np.float64)
    return (np.abs(x.astype(np.float64)) * f64[None, :]).astype(np.float32)


def _topn_keep(scores: np.ndarray, pattern: NMPattern) -> np.ndarray:
    """Keep-mask of the n largest scores per m-group, lowest index on ties."""
    rows, cols = scores.shape
    if cols % pattern.m != 0:
        raise ShapeError(f"cols {cols} not divisible by m={pattern.m}")
    grouped = scores.reshape(rows, -1, pattern.m)
    # Stable argsort of the negated scores: descending score, ascending index.
    order = np.argsort(-grouped, axis=2, kind="stable")
    keep = np.zeros(grouped.shape, dtype=bool)
    np.put_along_axis(keep, order[:, :, : pattern.n], True, axis=2)
    return keep.reshape(rows, cols)


def build_mask(scores, pattern: NMPattern) -> NMMask:
    """Mask keeping the n highest-scoring elements of every m-group."""
    scores = as_f32_2d(scores, "scores")
    return NMMask(_topn_keep(scores, pattern), pattern)


def apply_mask(x, mask: NMMask) -> np.ndarray:
    """Zero pruned positions; kept values are copied bit-exactly."""
    x = as_f32_2d(x, "x")
    if x.shape != mask.keep.shape:
        raise ShapeError(f"tensor {x.shape} vs mask {mask.keep.shape}")
    return np.where(mask.keep, x, np.float32(0.0))


def _thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def sparsify_with_mask(
    x, strategy: ScoreStrategy, pattern: NMPattern
) -> tuple[np.ndarray, NMMask]:
    """Score, mask, and apply in one step, returning the mask as well.

    Rows are independent, so when NM_SPARSIFY_THREADS allows it the row
    blocks run on a thread pool; the assembled result is identical to the
    sequential one.
    """
    x = as_f32_2d(x, "x")
    cap = _thread_cap()
    if cap > 1 and x.shape[0] >= 2 * cap:
        blocks = np.array_split(np.arange(x.shape[0]), cap)

        def work(rows):
            return _topn_keep(score_elements(x[rows], strategy), pattern)

        with ThreadPoolExecutor(max_workers=cap) as pool:
            parts = list(pool.map(work, blocks))
        keep = np.vstack(parts)
    else:
        keep = _topn_keep(score_elements(x, strategy), pattern)
    mask = NMMask(keep, pattern)
    return apply_mask(x, mask), mask


def sparsify(x, strategy: ScoreStrategy, pattern: NMPattern) -> np.ndarray:
    """N:M-sparsified copy of ``x`` under the given scoring strategy."""
    out, _ = sparsify_with_mask(x, strategy, pattern)
    return out


def weight_nm_prune(w, x_calib, pattern: NMPattern, mode: str) -> np.ndarray:
    """Offline N:M pruning of a weight tensor along its input dimension.

    ``magnitude`` ranks by |w|; ``wanda`` additionally weighs each input
    channel by the L2 norm of its calibration activations.  Groups run over
    m consecutive input channels for each output, with the same tie rule as
    activation masks.
    """
    w = as_f32_2d(w, "w")
    if mode not in ("magnitude", "wanda"):
        raise DomainError(f"unknown weight pruning mode {mode!r}")
    if w.shape[0] % pattern.m != 0:
        raise ShapeError(f"input dim {w.shape[0]} not divisible by m={pattern.m}")
    scores_t = np.abs(w.astype(np.float64)).T.copy()
    if mode == "wanda":
        x_calib = as_f32_2d(x_calib, "x_calib")
        if x_calib.shape[1] != w.shape[0]:
            raise ShapeError(
                f"calibration cols {x_calib.shape[1]} != weight input dim {w.shape[0]}"
            )
        calib_norms = input_channel_norms(np.ascontiguousarray(x_calib.T))
        scores_t *= calib_norms[None, :]
    keep_t = _topn_keep(scores_t, pattern)
    return np.where(keep_t.T, w, np.float32(0.0))
