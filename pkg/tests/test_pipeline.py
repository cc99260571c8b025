"""Tests for the end-to-end sparsification and quantized-sparsification flows."""

import numpy as np
import pytest

from nmsparse import quantization
from nmsparse.errors import ConfigError
from nmsparse.masking import NMPattern
from nmsparse.pipeline import (
    COMPARE_COLUMNS,
    MODE_SPARSE,
    MODE_SPARSE_QUANT,
    PipelineConfig,
    QuantSettings,
    compare_strategies,
    run,
    save_compare_csv,
)
from nmsparse.sensitivity import SkipPlan
from nmsparse.tensor_core import seeded_uniform
from nmsparse.toy_model import ORDER_SPARSIFY_FIRST, ToyConfig, init_model, mac_costs

CFG = ToyConfig()
MODEL = init_model(CFG)
X_EMBED = seeded_uniform(CFG.seq_len, CFG.d_model, -1.0, 1.0, 0)

FULL_COVERAGE = SkipPlan(frozenset(), frozenset(), 1.0, 1.0)


def _plan(skipped=(), always=()):
    return SkipPlan(frozenset(skipped), frozenset(always), 1.0, 1.0)


class TestPipelineConfig:
    def test_quant_settings_required_for_quant_mode(self):
        with pytest.raises(ConfigError):
            PipelineConfig(MODE_SPARSE_QUANT, NMPattern(2, 4), "naive_topk", FULL_COVERAGE)

    def test_quant_settings_forbidden_for_sparse_mode(self):
        with pytest.raises(ConfigError):
            PipelineConfig(
                MODE_SPARSE,
                NMPattern(2, 4),
                "naive_topk",
                FULL_COVERAGE,
                quant=QuantSettings(),
            )


class TestRun:
    def test_everything_skipped_is_a_no_op(self):
        plan = _plan(skipped=MODEL.sites())
        result = run(MODEL, X_EMBED, PipelineConfig(MODE_SPARSE, NMPattern(2, 4), "naive_topk", plan))
        assert result.e_total == 0.0
        assert result.mac_coverage == 0.0
        assert result.mac_savings == 0.0
        assert np.array_equal(
            result.output.view(np.uint32), result.baseline.view(np.uint32)
        )

    def test_full_keep_pattern_reproduces_baseline(self):
        result = run(
            MODEL,
            X_EMBED,
            PipelineConfig(MODE_SPARSE, NMPattern(4, 4), "naive_topk", FULL_COVERAGE),
        )
        assert result.e_total == 0.0
        assert result.mac_coverage == 1.0
        assert result.mac_savings == 0.0
        assert np.array_equal(
            result.output.view(np.uint32), result.baseline.view(np.uint32)
        )

    def test_savings_arithmetic(self):
        plan = _plan(always=("k_proj", "v_proj"))
        pattern = NMPattern(8, 16)
        result = run(
            MODEL, X_EMBED, PipelineConfig(MODE_SPARSE, pattern, "naive_topk", plan)
        )
        costs = mac_costs(CFG)
        total = sum(costs.values())
        covered = sum(c for s, c in costs.items() if plan.is_covered(s))
        assert result.mac_coverage == covered / total
        assert result.mac_savings == (covered / total) * (1 - pattern.ratio)
        assert result.e_total > 0.0

    def test_sparse_mode_never_quantizes(self):
        before = quantization.quantize_call_count()
        run(
            MODEL,
            X_EMBED,
            PipelineConfig(MODE_SPARSE, NMPattern(2, 4), "wanda_like", FULL_COVERAGE),
        )
        assert quantization.quantize_call_count() == before

    def test_quant_mode_quantizes_and_respects_skip_kinds(self):
        settings = QuantSettings(alpha=0.10, inverted=True,
                                 quant_skip_kinds=frozenset({"down_proj"}))
        before = quantization.quantize_call_count()
        result = run(
            MODEL,
            X_EMBED,
            PipelineConfig(
                MODE_SPARSE_QUANT,
                NMPattern(8, 16),
                "naive_topk",
                FULL_COVERAGE,
                quant=settings,
            ),
        )
        # 2 quantize calls per quantized projection, 6 of 7 kinds per layer.
        assert quantization.quantize_call_count() - before == 2 * 6 * CFG.layers
        assert result.e_total > 0.0

    def test_quant_only_deviation_small_against_sparsity(self):
        settings = QuantSettings(alpha=0.10, inverted=True)
        quant_only = run(
            MODEL,
            X_EMBED,
            PipelineConfig(
                MODE_SPARSE_QUANT,
                NMPattern(16, 16),
                "naive_topk",
                FULL_COVERAGE,
                quant=settings,
            ),
        )
        sparse_only = run(
            MODEL,
            X_EMBED,
            PipelineConfig(MODE_SPARSE, NMPattern(8, 16), "naive_topk", FULL_COVERAGE),
        )
        assert 0.0 < quant_only.e_total < sparse_only.e_total

    def test_transform_order_flag_changes_masks(self):
        settings = QuantSettings(alpha=0.10, inverted=True)
        base = PipelineConfig(
            MODE_SPARSE_QUANT,
            NMPattern(2, 4),
            "naive_topk",
            FULL_COVERAGE,
            quant=settings,
        )
        alt = PipelineConfig(
            MODE_SPARSE_QUANT,
            NMPattern(2, 4),
            "naive_topk",
            FULL_COVERAGE,
            quant=settings,
            order=ORDER_SPARSIFY_FIRST,
        )
        a = run(MODEL, X_EMBED, base)
        b = run(MODEL, X_EMBED, alt)
        assert (a.output != b.output).any()

    def test_factor_refresh_flag_is_observable(self):
        settings = QuantSettings(alpha=0.5, inverted=True)
        fresh = run(
            MODEL,
            X_EMBED,
            PipelineConfig(
                MODE_SPARSE_QUANT,
                NMPattern(2, 4),
                "wanda_like",
                FULL_COVERAGE,
                quant=settings,
            ),
        )
        stale = run(
            MODEL,
            X_EMBED,
            PipelineConfig(
                MODE_SPARSE_QUANT,
                NMPattern(2, 4),
                "wanda_like",
                FULL_COVERAGE,
                quant=settings,
                refresh_factors_after_smoothing=False,
            ),
        )
        assert (fresh.output != stale.output).any()

    def test_deterministic(self):
        cfg = PipelineConfig(MODE_SPARSE, NMPattern(2, 4), "robust_norm", FULL_COVERAGE)
        a = run(MODEL, X_EMBED, cfg)
        b = run(MODEL, X_EMBED, cfg)
        assert np.array_equal(a.output.view(np.uint32), b.output.view(np.uint32))
        assert a.e_total == b.e_total

    def test_plan_outside_model_rejected(self):
        from nmsparse.toy_model import ProjectionSite

        plan = _plan(skipped=[ProjectionSite(99, "q_proj")])
        with pytest.raises(ConfigError):
            run(MODEL, X_EMBED, PipelineConfig(MODE_SPARSE, NMPattern(2, 4), "naive_topk", plan))


class TestCompareStrategies:
    def test_duplicate_strategy_gives_identical_rows(self):
        rows = compare_strategies(
            MODEL,
            X_EMBED,
            [NMPattern(2, 4)],
            ["naive_topk", "naive_topk"],
            FULL_COVERAGE,
            include_weight_baselines=False,
        )
        assert rows[0].e_total == rows[1].e_total

    def test_full_keep_rows_are_zero_for_activation_strategies(self):
        rows = compare_strategies(
            MODEL,
            X_EMBED,
            [NMPattern(4, 4)],
            ["naive_topk", "wanda_like"],
            FULL_COVERAGE,
            include_weight_baselines=False,
        )
        assert all(r.e_total == 0.0 for r in rows)

    def test_rows_match_individual_runs(self):
        rows = compare_strategies(
            MODEL,
            X_EMBED,
            [NMPattern(2, 4)],
            ["naive_topk", "wanda_like"],
            FULL_COVERAGE,
            include_weight_baselines=False,
        )
        for row in rows:
            res = run(
                MODEL,
                X_EMBED,
                PipelineConfig(MODE_SPARSE, row.pattern, row.strategy, FULL_COVERAGE),
            )
            assert row.e_total == pytest.approx(res.e_total, abs=1e-9)
            assert row.mac_fraction == res.mac_coverage

    def test_weight_baselines_present_and_positive(self):
        rows = compare_strategies(
            MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"], FULL_COVERAGE
        )
        names = [r.strategy for r in rows]
        assert names == ["naive_topk", "weight_magnitude", "weight_wanda"]
        assert all(r.e_total > 0.0 for r in rows)

    def test_nested_pattern_ordering_on_fixture(self):
        rows = compare_strategies(
            MODEL,
            X_EMBED,
            [NMPattern(1, 4), NMPattern(2, 4), NMPattern(3, 4), NMPattern(4, 4)],
            ["naive_topk"],
            FULL_COVERAGE,
            include_weight_baselines=False,
        )
        es = [r.e_total for r in rows]
        assert es[0] >= es[1] >= es[2] >= es[3] == 0.0

    def test_csv_emission(self, tmp_path):
        rows = compare_strategies(
            MODEL,
            X_EMBED,
            [NMPattern(2, 4)],
            ["naive_topk"],
            FULL_COVERAGE,
            include_weight_baselines=False,
        )
        p = tmp_path / "table.csv"
        save_compare_csv(p, rows)
        text = p.read_text(encoding="utf-8").splitlines()
        assert text[0] == ",".join(COMPARE_COLUMNS)
        assert text[1].startswith("2:4,naive_topk,")
