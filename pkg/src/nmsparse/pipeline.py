"""End-to-end flows: sparsification alone or stacked with W8A8 quantization.

A run executes the dense baseline and the configured forward pass, then
reports the relative output deviation plus the compute accounting:
``mac_coverage`` is the fraction of linear multiply-accumulates routed
through the sparse kernel, ``mac_savings`` the fraction eliminated
(coverage times ``1 - n/m``).

In the quantized mode every non-excluded site gets channel smoothing
calibrated from its dense captured activations; by default the smoothing
division happens before mask selection (so the mask sees the widened
distribution) and scoring factors are recomputed on the smoothed weights,
which are the ones actually multiplied.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .masking import NMPattern, weight_nm_prune
from .quantization import calibrate_smooth_scales
from .sensitivity import DEFAULT_EPSILON, SkipPlan, relative_error, strategy_for_weight
from .tensor_core import as_f32_2d
from .toy_model import (
    ORDER_SMOOTH_FIRST,
    ORDER_SPARSIFY_FIRST,
    ModelWeights,
    QuantizeSpec,
    SiteConfig,
    SparsifySpec,
    forward,
    forward_and_capture,
    mac_costs,
)

__all__ = [
    "MODE_SPARSE",
    "MODE_SPARSE_QUANT",
    "QuantSettings",
    "PipelineConfig",
    "RunResult",
    "CompareRow",
    "COMPARE_COLUMNS",
    "run",
    "compare_strategies",
    "save_compare_csv",
]

MODE_SPARSE = "sparse"
MODE_SPARSE_QUANT = "sparse_quant"

COMPARE_COLUMNS = ["pattern", "strategy", "e_total", "mac_fraction"]

WEIGHT_BASELINE_MODES = ("magnitude", "wanda")


@dataclass(frozen=True)
class QuantSettings:
    """W8A8 stage configuration: smoothing exponent and per-kind exclusions."""

    alpha: float = 0.10
    inverted: bool = True
    quant_skip_kinds: frozenset[str] = frozenset()


@dataclass(frozen=True)
class PipelineConfig:
    mode: str
    pattern: NMPattern
    strategy_kind: str
    plan: SkipPlan
    quant: QuantSettings | None = None
    order: str = ORDER_SMOOTH_FIRST
    refresh_factors_after_smoothing: bool = True
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.mode not in (MODE_SPARSE, MODE_SPARSE_QUANT):
            raise ConfigError(f"unknown pipeline mode {self.mode!r}")
        if self.mode == MODE_SPARSE_QUANT and self.quant is None:
            raise ConfigError("quantized mode needs quantization settings")
        if self.mode == MODE_SPARSE and self.quant is not None:
            raise ConfigError("sparsify-only mode forbids quantization settings")
        if self.order not in (ORDER_SMOOTH_FIRST, ORDER_SPARSIFY_FIRST):
            raise ConfigError(f"unknown transform order {self.order!r}")


@dataclass(frozen=True)
class RunResult:
    output: np.ndarray
    baseline: np.ndarray
    e_total: float
    mac_coverage: float
    mac_savings: float


def _coverage_fractions(
    model: ModelWeights, plan: SkipPlan, pattern: NMPattern
) -> tuple[float, float]:
    costs = mac_costs(model.config)
    total = sum(costs.values())
    covered = sum(cost for site, cost in costs.items() if plan.is_covered(site))
    coverage = covered / total
    return coverage, coverage * (1.0 - pattern.ratio)


def run(model: ModelWeights, x_embed, cfg: PipelineConfig) -> RunResult:
    """Dense baseline plus the configured pass, with deviation and accounting."""
    x_embed = as_f32_2d(x_embed, "x_embed")
    for site in cfg.plan.skipped:
        if site.layer >= model.config.layers:
            raise ConfigError(f"plan references site {site} outside the model")

    need_capture = cfg.quant is not None
    if need_capture:
        baseline, captures = forward_and_capture(model, x_embed)
    else:
        baseline = forward(model, x_embed)
        captures = {}

    site_cfg: dict = {}
    for site in model.sites():
        w = model.weight(site)
        quant_spec = None
        smoothed_w = None
        if cfg.quant is not None and site.kind not in cfg.quant.quant_skip_kinds:
            scales = calibrate_smooth_scales(
                captures[site], w, cfg.quant.alpha, cfg.quant.inverted
            )
            quant_spec = QuantizeSpec(smooth=scales, order=cfg.order)
            smoothed_w = (w.astype(np.float64) * scales.s[:, None]).astype(np.float32)
        sparsify_spec = None
        if cfg.plan.is_covered(site):
            factor_source = w
            if smoothed_w is not None and cfg.refresh_factors_after_smoothing:
                factor_source = smoothed_w
            strategy = strategy_for_weight(cfg.strategy_kind, factor_source)
            sparsify_spec = SparsifySpec(cfg.pattern, strategy)
        if quant_spec is not None or sparsify_spec is not None:
            site_cfg[site] = SiteConfig(sparsify=sparsify_spec, quantize=quant_spec)

    output = forward(model, x_embed, site_cfg)
    coverage, savings = _coverage_fractions(model, cfg.plan, cfg.pattern)
    return RunResult(
        output=output,
        baseline=baseline,
        e_total=relative_error(baseline, output, cfg.epsilon),
        mac_coverage=coverage,
        mac_savings=savings,
    )


@dataclass(frozen=True)
class CompareRow:
    pattern: NMPattern
    strategy: str
    e_total: float
    mac_fraction: float


def compare_strategies(
    model: ModelWeights,
    x_embed,
    patterns,
    strategy_kinds,
    plan: SkipPlan,
    include_weight_baselines: bool = True,
    epsilon: float = DEFAULT_EPSILON,
) -> list[CompareRow]:
    """Deviation table over (pattern, strategy) cells.

    Activation strategies run through the sparsification pipeline; the
    weight rows prune the covered sites' weights offline (magnitude and
    calibrated-norm ranking) and run dense activations through the pruned
    model, giving the activation-vs-weight contrast at equal coverage.
    """
    x_embed = as_f32_2d(x_embed, "x_embed")
    rows: list[CompareRow] = []
    baseline, captures = forward_and_capture(model, x_embed)
    for pattern in patterns:
        coverage, _ = _coverage_fractions(model, plan, pattern)
        for kind in strategy_kinds:
            cfg = PipelineConfig(MODE_SPARSE, pattern, kind, plan, epsilon=epsilon)
            result = run(model, x_embed, cfg)
            rows.append(CompareRow(pattern, kind, result.e_total, coverage))
        if not include_weight_baselines:
            continue
        for mode in WEIGHT_BASELINE_MODES:
            weights = {}
            for site in model.sites():
                w = model.weight(site)
                if plan.is_covered(site):
                    calib = captures[site] if mode == "wanda" else None
                    w = weight_nm_prune(w, calib, pattern, mode)
                weights[site] = w
            pruned_model = ModelWeights(model.config, weights)
            y = forward(pruned_model, x_embed)
            rows.append(
                CompareRow(
                    pattern, f"weight_{mode}", relative_error(baseline, y, epsilon),
                    coverage,
                )
            )
    return rows


def save_compare_csv(path, rows: list[CompareRow]) -> None:
    from .tensor_io import fmt_float, write_csv

    write_csv(
        path,
        COMPARE_COLUMNS,
        [
            [str(r.pattern), r.strategy, fmt_float(r.e_total), fmt_float(r.mac_fraction)]
            for r in rows
        ],
    )
