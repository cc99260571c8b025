"""Tests for scoring factors and the perturbation-energy references."""

import math

import numpy as np
import pytest

from nmsparse.errors import DegenerateWeightsError, DomainError
from nmsparse.masking import NMPattern, ScoreStrategy, build_mask, score_elements
from nmsparse.scoring import (
    energy_approximation,
    group_optimal_keep,
    perturbation_energy,
    plain_factors,
    robust_factors,
)
from nmsparse.tensor_core import seeded_uniform, tensor2d


def _reference_robust_factors(w, lo_q, hi_q):
    """Step-by-step reference: sorting percentiles, two-pass moments, loops."""
    flat = sorted(float(v) for v in w.ravel())
    n = len(flat)

    def rank(q):
        return min(max(math.ceil(q * n), 1), n)

    q_lo = flat[rank(lo_q) - 1]
    q_hi = flat[rank(hi_q) - 1]
    inliers = [v for v in flat if q_lo <= v <= q_hi]
    mean = sum(inliers) / len(inliers)
    var = sum((v - mean) ** 2 for v in inliers) / len(inliers)
    std = math.sqrt(var)
    norms = []
    for row in w:
        acc = 0.0
        for v in row:
            z = (min(max(float(v), q_lo), q_hi) - mean) / std
            acc += z * z
        norms.append(math.sqrt(acc))
    floor = max(min(norms), 1e-12)
    return [v / floor for v in norms]


class TestPlainFactors:
    def test_identity_weights_give_unit_factors(self):
        f = plain_factors(tensor2d(np.eye(4)))
        np.testing.assert_array_equal(f.values, np.ones(4, dtype=np.float32))
        assert f.kind == "plain"

    def test_min_normalization(self):
        w = tensor2d([[3.0, 4.0], [1.0, 0.0]])  # channel norms 5 and 1
        np.testing.assert_array_equal(plain_factors(w).values, [5.0, 1.0])

    def test_matches_loop_oracle(self):
        w = seeded_uniform(16, 8, -1.0, 1.0, 13)
        norms = []
        for j in range(16):
            norms.append(math.sqrt(sum(float(w[j, o]) ** 2 for o in range(8))))
        want = np.array(norms) / max(min(norms), 1e-12)
        np.testing.assert_allclose(plain_factors(w).values, want, rtol=1e-6)

    def test_minimum_factor_is_one(self):
        for seed in range(4):
            f = plain_factors(seeded_uniform(12, 6, -2.0, 2.0, 40 + seed))
            assert f.values.min() == 1.0

    def test_source_hash_tracks_weights(self):
        a = seeded_uniform(4, 4, -1.0, 1.0, 1)
        b = seeded_uniform(4, 4, -1.0, 1.0, 2)
        assert plain_factors(a).source_hash != plain_factors(b).source_hash


class TestRobustFactors:
    def test_no_outliers_reduces_to_plain_of_standardized(self):
        w = seeded_uniform(24, 24, -1.0, 1.0, 50)
        # Full window: nothing clamped, statistics over everything.
        robust = robust_factors(w, lo_q=0.0, hi_q=1.0)
        mean = float(w.astype(np.float64).mean())
        std = math.sqrt(float(((w.astype(np.float64) - mean) ** 2).mean()))
        standardized = ((w.astype(np.float64) - mean) / std).astype(np.float32)
        plain = plain_factors(standardized)
        np.testing.assert_allclose(robust.values, plain.values, rtol=1e-5)
        assert robust.kind == "robust"

    def test_positive_rescale_invariance(self):
        w = seeded_uniform(20, 16, -1.0, 1.0, 51)
        base = robust_factors(w)
        scaled = robust_factors(tensor2d(w.astype(np.float64) * 3.7))
        np.testing.assert_allclose(scaled.values, base.values, rtol=1e-6)

    def test_matches_step_by_step_oracle_with_outliers(self):
        w = seeded_uniform(32, 32, -1.0, 1.0, 17).copy()
        w[0, 0], w[5, 7], w[11, 3] = 100.0, -100.0, 100.0
        got = robust_factors(w)
        want = _reference_robust_factors(w, 0.005, 0.995)
        np.testing.assert_allclose(got.values, want, rtol=1e-6)

    def test_constant_inliers_rejected(self):
        with pytest.raises(DegenerateWeightsError):
            robust_factors(tensor2d(np.ones((4, 4))))

    def test_bad_window_rejected(self):
        w = seeded_uniform(4, 4, -1.0, 1.0, 0)
        with pytest.raises(DomainError):
            robust_factors(w, lo_q=0.9, hi_q=0.1)


class TestPerturbationEnergy:
    def test_empty_prune_set(self):
        w = seeded_uniform(4, 4, -1.0, 1.0, 0)
        assert perturbation_energy([1.0, 2.0, 3.0, 4.0], w, set()) == 0.0

    def test_orthogonal_columns_closed_form(self):
        w = tensor2d(2.0 * np.eye(3))
        assert perturbation_energy([1.0, 2.0, 3.0], w, {0}) == 4.0

    def test_matches_matmul_oracle(self):
        w = seeded_uniform(8, 8, -1.0, 1.0, 60)
        x = seeded_uniform(1, 8, -1.0, 1.0, 61).ravel()
        pruned = {1, 5}
        # Dense float64 product of the residual row with the weights.
        residual = np.zeros(8, dtype=np.float64)
        for j in pruned:
            residual[j] = x[j]
        delta = residual @ w.astype(np.float64)
        want = float((delta * delta).sum())
        assert perturbation_energy(x, w, pruned) == pytest.approx(want, abs=1e-10)

    def test_out_of_range_index(self):
        w = seeded_uniform(4, 4, -1.0, 1.0, 0)
        with pytest.raises(DomainError):
            perturbation_energy([1.0, 1.0, 1.0, 1.0], w, {4})


class TestEnergyApproximation:
    def test_empty_prune_set(self):
        w = seeded_uniform(4, 4, -1.0, 1.0, 0)
        assert energy_approximation([1.0] * 4, w, set()) == 0.0

    def test_exact_on_orthogonal_columns(self):
        # Scaled permutation: channels are orthogonal, cross terms vanish.
        perm = np.zeros((6, 6), dtype=np.float32)
        scales = [0.5, 2.0, 1.5, 3.0, 0.25, 1.0]
        for j, col in enumerate([3, 0, 5, 1, 4, 2]):
            perm[j, col] = scales[j]
        x = seeded_uniform(1, 6, -2.0, 2.0, 62).ravel()
        pruned = {0, 2, 4}
        exact = perturbation_energy(x, perm, pruned)
        approx = energy_approximation(x, perm, pruned)
        assert abs(approx - exact) <= 1e-10 * max(exact, 1.0)

    def test_discrepancy_equals_cross_terms(self):
        w = seeded_uniform(8, 8, -1.0, 1.0, 63)
        x = seeded_uniform(1, 8, -1.0, 1.0, 64).ravel().astype(np.float64)
        pruned = sorted({0, 3, 5, 6})
        exact = perturbation_energy(x, w, pruned)
        approx = energy_approximation(x, w, pruned)
        w64 = w.astype(np.float64)
        cross = 0.0
        for a in range(len(pruned)):
            for b in range(a + 1, len(pruned)):
                j, k = pruned[a], pruned[b]
                cross += 2.0 * x[j] * x[k] * float(np.dot(w64[j], w64[k]))
        assert abs((exact - approx) - cross) <= 1e-8 * max(abs(exact), 1.0)


class TestGroupOptimalKeep:
    def test_equal_norms_reduce_to_topk(self):
        x = [0.5, -2.0, 1.0, 0.1]
        kept = group_optimal_keep(x, [1.0] * 4, 2)
        assert kept == (1, 2)

    def test_norms_can_flip_choice(self):
        assert group_optimal_keep([1.0, 2.0], [4.0, 1.0], 1) == (0,)

    def test_separable_objective_matches_argmax(self):
        x = seeded_uniform(1, 8, -1.0, 1.0, 21).ravel()
        norms = np.abs(seeded_uniform(1, 8, 0.1, 2.0, 22)).ravel()
        contrib = (x.astype(np.float64) ** 2) * (norms.astype(np.float64) ** 2)
        want = tuple(sorted(np.argsort(-contrib, kind="stable")[:4].tolist()))
        assert group_optimal_keep(x, norms, 4) == want

    def test_keep_all(self):
        assert group_optimal_keep([1.0, 2.0], [1.0, 1.0], 2) == (0, 1)

    def test_wanda_mask_agrees_with_energy_optimum(self):
        # Ranking by |x| * factor and by x^2 * norm^2 must select the same set.
        w = seeded_uniform(16, 8, -1.0, 1.0, 23)
        x = seeded_uniform(3, 16, -1.0, 1.0, 24)
        factors = plain_factors(w)
        norms = np.sqrt((w.astype(np.float64) ** 2).sum(axis=1))
        mask = build_mask(
            score_elements(x, ScoreStrategy.wanda_like(factors)), NMPattern(2, 4)
        )
        for i in range(x.shape[0]):
            for g in range(4):
                sl = slice(4 * g, 4 * g + 4)
                kept = tuple(j for j in range(4) if mask.keep[i, sl][j])
                want = group_optimal_keep(x[i, sl], norms[sl], 2)
                assert kept == want
