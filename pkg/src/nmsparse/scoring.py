"""Per-input-channel scoring factors and perturbation-energy references.

Factors multiply activation magnitudes during mask scoring.  They are
precomputed offline from a weight tensor, either directly from channel
norms (plain) or from winsorized, standardized weights (robust).  The
energy functions quantify the exact and approximate output damage of
pruning a set of activation channels; they serve as the theoretical
reference the masking heuristics are tested against.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import combinations

import numpy as np

from .errors import DegenerateWeightsError, DomainError, ShapeError
from .tensor_core import (
    as_f32_2d,
    input_channel_norms,
    mean_var,
    percentile_nearest_rank,
    tensor_digest,
)

__all__ = [
    "MIN_NORM_CLAMP",
    "ScoringFactors",
    "plain_factors",
    "robust_factors",
    "perturbation_energy",
    "energy_approximation",
    "group_optimal_keep",
]

# Floor on the minimum channel norm used for normalization; keeps dead
# channels from blowing up the ratio while staying far below any real norm.
MIN_NORM_CLAMP = 1e-12

FACTOR_KINDS = ("plain", "robust")


@dataclass(frozen=True)
class ScoringFactors:
    """Per-input-channel multipliers, min-normalized so the smallest is 1.

    ``source_hash`` records the digest of the weight tensor the factors came
    from; it is provenance metadata and excluded from equality (container
    files do not carry it).
    """

    values: np.ndarray
    kind: str
    source_hash: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in FACTOR_KINDS:
            raise DomainError(f"unknown factor kind {self.kind!r}")
        v = np.ascontiguousarray(self.values, dtype=np.float32)
        if v.ndim != 1 or v.size == 0:
            raise ShapeError("factors must be a non-empty 1-D vector")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ScoringFactors)
            and self.kind == other.kind
            and np.array_equal(self.values, other.values)
        )


def _min_normalize(norms: np.ndarray) -> np.ndarray:
    return norms / max(float(norms.min()), MIN_NORM_CLAMP)


def plain_factors(w) -> ScoringFactors:
    """Channel norms divided by the smallest channel norm."""
    w = as_f32_2d(w, "w")
    factors = _min_normalize(input_channel_norms(w))
    return ScoringFactors(factors.astype(np.float32), "plain", tensor_digest(w))


def robust_factors(w, lo_q: float = 0.005, hi_q: float = 0.995) -> ScoringFactors:
    """Factors from winsorized, standardized weights.

    Steps: global nearest-rank percentiles over all entries; population
    mean/variance over the inlier set; every entry clamped to the percentile
    bounds and standardized with the inlier statistics; channel norms of the
    standardized tensor, min-normalized as in ``plain_factors``.  Clamping
    (rather than dropping) outliers keeps every channel the same length so
    norms stay comparable.
    """
    w = as_f32_2d(w, "w")
    if w.size == 0:
        raise ShapeError("weight tensor is empty")
    if not (0.0 <= lo_q < hi_q <= 1.0):
        raise DomainError(f"percentile window [{lo_q}, {hi_q}] is invalid")
    flat = w.ravel()
    q_lo = percentile_nearest_rank(flat, lo_q)
    q_hi = percentile_nearest_rank(flat, hi_q)
    inliers = flat[(flat >= q_lo) & (flat <= q_hi)]
    mean, var = mean_var(inliers)
    if var == 0.0:
        raise DegenerateWeightsError("inlier weights are constant; scores undefined")
    z = (np.clip(w.astype(np.float64), q_lo, q_hi) - mean) / np.sqrt(var)
    # Ascending accumulation over the output dim, as in input_channel_norms.
    acc = np.zeros(w.shape[0], dtype=np.float64)
    for o in range(w.shape[1]):
        acc += z[:, o] * z[:, o]
    factors = _min_normalize(np.sqrt(acc))
    return ScoringFactors(factors.astype(np.float32), "robust", tensor_digest(w))


def _checked_pruned(pruned, d_in: int) -> list[int]:
    idx = sorted(int(j) for j in pruned)
    if idx and not (0 <= idx[0] and idx[-1] < d_in):
        raise DomainError(f"pruned index outside [0, {d_in})")
    return idx


def perturbation_energy(x_row, w, pruned) -> float:
    """Exact squared L2 norm of the output change from zeroing ``pruned`` channels."""
    w = as_f32_2d(w, "w")
    x = np.asarray(x_row, dtype=np.float64).ravel()
    if x.size != w.shape[0]:
        raise ShapeError(f"activation length {x.size} != input dim {w.shape[0]}")
    idx = _checked_pruned(pruned, w.shape[0])
    w64 = w.astype(np.float64)
    delta = np.zeros(w.shape[1], dtype=np.float64)
    for j in idx:
        delta += x[j] * w64[j, :]
    return float(np.dot(delta, delta))


def energy_approximation(x_row, w, pruned) -> float:
    """Separable approximation: sum over pruned j of x_j^2 * ||channel j||^2.

    Exact when the weight channels are orthogonal (cross terms vanish).
    """
    w = as_f32_2d(w, "w")
    x = np.asarray(x_row, dtype=np.float64).ravel()
    if x.size != w.shape[0]:
        raise ShapeError(f"activation length {x.size} != input dim {w.shape[0]}")
    idx = _checked_pruned(pruned, w.shape[0])
    norms = input_channel_norms(w)
    return float(sum(x[j] * x[j] * norms[j] * norms[j] for j in idx))


@lru_cache(maxsize=64)
def _subset_tables(m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """All C(m, n) kept subsets in lexicographic order, with their complements."""
    kept = np.array(list(combinations(range(m), n)), dtype=np.int64)
    pruned = np.empty((kept.shape[0], m - n), dtype=np.int64)
    universe = set(range(m))
    for r, row in enumerate(kept):
        pruned[r] = sorted(universe - set(int(v) for v in row))
    return kept, pruned


def group_optimal_keep(x_group, channel_norms, n: int) -> tuple[int, ...]:
    """Kept index set minimizing the pruned energy sum, by exhaustive enumeration.

    Ties resolve to the lexicographically smallest kept set.
    """
    x = np.asarray(x_group, dtype=np.float64).ravel()
    norms = np.asarray(channel_norms, dtype=np.float64).ravel()
    if x.size != norms.size:
        raise ShapeError("activation group and norms differ in length")
    m = x.size
    if not 1 <= n <= m:
        raise DomainError(f"keep count {n} outside [1, {m}]")
    contrib = (x * x) * (norms * norms)
    kept, pruned = _subset_tables(m, n)
    if pruned.shape[1] == 0:
        return tuple(range(m))
    pruned_sums = contrib[pruned].sum(axis=1)
    best = int(np.argmin(pruned_sums))  # argmin takes the first (lex smallest) tie
    return tuple(int(v) for v in kept[best])
