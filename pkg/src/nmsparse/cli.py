"""Batch command-line interface.

Every command is deterministic given its arguments and input files: data
goes to files or stdout, diagnostics to stderr, and error exits print one
machine-parseable ``error[<code>]: <message>`` line.  Exit codes: 0 on
success, 1 on domain or validation failures, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import pipeline as pl
from .errors import ConfigError, NMSparseError, ValidationError
from .masking import NMPattern, ScoreStrategy, sparsify_with_mask
from .quantization import calibrate_smooth_scales, quantize
from .scoring import ScoringFactors, plain_factors, robust_factors
from .sensitivity import (
    DEFAULT_EPSILON,
    SensitivityReport,
    SkipPlan,
    average_reports,
    plan_skips,
    sweep,
)
from .spmm import CompressedNM, compress, decompress, flop_report, spmm
from .tensor_core import matmul, seeded_uniform
from .tensor_io import emit_heatmap, fmt_float, read_tensor, write_csv, write_tensor
from .toy_model import (
    ORDER_SMOOTH_FIRST,
    ORDER_SPARSIFY_FIRST,
    PROJECTION_KINDS,
    ToyConfig,
    export_model,
    import_model,
    init_model,
    mac_costs,
)

STRATEGY_TOKENS = {
    "naive": "naive_topk",
    "wanda": "wanda_like",
    "robust": "robust_norm",
}

RUN_METRIC_COLUMNS = ["mode", "pattern", "strategy", "e_total", "mac_coverage", "mac_savings"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error[usage]: {message}", file=sys.stderr)
        raise SystemExit(2)


def _pattern(text: str) -> NMPattern:
    try:
        return NMPattern.parse(text)
    except NMSparseError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _pattern_list(text: str) -> list[NMPattern]:
    return [_pattern(tok) for tok in text.split(",") if tok]


def _strategy_list(text: str) -> list[str]:
    kinds = []
    for tok in text.split(","):
        if tok not in STRATEGY_TOKENS:
            raise argparse.ArgumentTypeError(
                f"unknown strategy {tok!r} (choose from {', '.join(STRATEGY_TOKENS)})"
            )
        kinds.append(STRATEGY_TOKENS[tok])
    if not kinds:
        raise argparse.ArgumentTypeError("empty strategy list")
    return kinds


def _kind_list(text: str) -> frozenset[str]:
    kinds = frozenset(tok for tok in text.split(",") if tok)
    for kind in kinds:
        if kind not in PROJECTION_KINDS:
            raise argparse.ArgumentTypeError(f"unknown projection kind {kind!r}")
    return kinds


def _read_dense(path) -> np.ndarray:
    obj = read_tensor(path)
    if not isinstance(obj, np.ndarray) or obj.dtype != np.float32:
        raise ValidationError(f"{path}: expected a dense float32 tensor")
    return obj


def _read_compressed(path) -> CompressedNM:
    obj = read_tensor(path)
    if not isinstance(obj, CompressedNM):
        raise ValidationError(f"{path}: expected a compressed N:M tensor")
    return obj


def _build_parser() -> _Parser:
    parser = _Parser(prog="nmsparse", description=__doc__)
    parser.add_argument("--seed", type=int, default=0, help="RNG seed for gen commands")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate synthetic tensors or a toy model")
    gen_sub = p.add_subparsers(dest="what", required=True)
    g_tensor = gen_sub.add_parser("tensor", help="seeded uniform tensor")
    g_tensor.add_argument("--rows", type=int, required=True)
    g_tensor.add_argument("--cols", type=int, required=True)
    g_tensor.add_argument("--lo", type=float, default=-1.0)
    g_tensor.add_argument("--hi", type=float, default=1.0)
    g_tensor.add_argument("--out", required=True)
    g_model = gen_sub.add_parser("model", help="seeded toy transformer directory")
    g_model.add_argument("--out", required=True)
    g_model.add_argument("--layers", type=int, default=4)
    g_model.add_argument("--d-model", type=int, default=64)
    g_model.add_argument("--heads", type=int, default=4)
    g_model.add_argument("--d-ff", type=int, default=128)
    g_model.add_argument("--seq-len", type=int, default=32)
    g_model.add_argument("--rope-base", type=float, default=10000.0)

    p = sub.add_parser("factors", help="precompute per-channel scoring factors")
    p.add_argument("--weights", required=True)
    p.add_argument("--kind", choices=("plain", "robust"), required=True)
    p.add_argument("--lo-q", type=float, default=0.005)
    p.add_argument("--hi-q", type=float, default=0.995)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sparsify", help="N:M-sparsify activations into compressed form")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--pattern", type=_pattern, required=True)
    p.add_argument("--strategy", choices=tuple(STRATEGY_TOKENS), required=True)
    p.add_argument("--weights", help="weight tensor to derive factors from")
    p.add_argument("--factors", help="precomputed factors container")
    p.add_argument("--out", required=True)

    p = sub.add_parser("quantize", help="symmetric INT8 quantization")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--scheme", choices=("per-tensor", "per-channel"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales-out", required=True)

    p = sub.add_parser("smooth-calibrate", help="channel smoothing scales")
    p.add_argument("--calib", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--alpha", type=float, default=None,
                   help="smoothing exponent (default 0.10 inverted, 0.5 plain)")
    p.add_argument("--inverted", action="store_true",
                   help="store reciprocal scales (widens the activation range)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("spmm-check", help="verify the sparse kernel against dense")
    p.add_argument("--x", required=True, help="compressed activation container")
    p.add_argument("--w", required=True, help="dense weight container")

    p = sub.add_parser("sensitivity", help="per-site perturbation sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--input", action="append", required=True,
                   help="embedded input tensor; repeat to average over inputs")
    p.add_argument("--patterns", type=_pattern_list, required=True)
    p.add_argument("--strategies", type=_strategy_list, required=True)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plan", help="budget-constrained skip plan from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--always-skip", type=_kind_list, default=frozenset())
    p.add_argument("--pattern", type=_pattern, help="report slice to rank by")
    p.add_argument("--strategy", choices=tuple(STRATEGY_TOKENS),
                   help="report slice to rank by")
    p.add_argument("--model", help="model directory for real MAC costs (default uniform)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="end-to-end configured forward pass")
    _add_run_args(p)
    p.add_argument("--out", required=True, help="configured output tensor")
    p.add_argument("--baseline-out", help="dense baseline tensor")
    p.add_argument("--metrics-out", help="metrics CSV")

    p = sub.add_parser("compare", help="deviation table over patterns and strategies")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--patterns", type=_pattern_list, required=True)
    p.add_argument("--strategies", type=_strategy_list, required=True)
    p.add_argument("--plan", help="skip plan JSON (default: cover everything)")
    p.add_argument("--no-weight-baselines", action="store_true")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", required=True)

    p = sub.add_parser("heatmap", help="PGM/PPM activation heatmap")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mode", choices=("abs", "signed"), required=True)
    p.add_argument("--out", required=True)

    return parser


def _add_run_args(p) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--mode", choices=("sparse", "sparse-quant"), required=True)
    p.add_argument("--pattern", type=_pattern, required=True)
    p.add_argument("--strategy", choices=tuple(STRATEGY_TOKENS), required=True)
    p.add_argument("--plan", help="skip plan JSON (default: cover everything)")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--no-inverted", action="store_true",
                   help="plain smoothing direction instead of reciprocal scales")
    p.add_argument("--quant-skip", type=_kind_list, default=frozenset(),
                   help="projection kinds excluded from quantization")
    p.add_argument("--order", choices=("smooth-first", "sparsify-first"),
                   default="smooth-first")
    p.add_argument("--reuse-raw-factors", action="store_true",
                   help="score with factors from unsmoothed weights")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)


def _load_plan(path) -> SkipPlan:
    if path is None:
        return SkipPlan(frozenset(), frozenset(), 1.0, 1.0)
    return SkipPlan.load(path)


def _cmd_gen(args) -> int:
    if args.what == "tensor":
        write_tensor(args.out, seeded_uniform(args.rows, args.cols, args.lo, args.hi, args.seed))
    else:
        cfg = ToyConfig(
            layers=args.layers,
            d_model=args.d_model,
            heads=args.heads,
            d_ff=args.d_ff,
            seq_len=args.seq_len,
            rope_base=args.rope_base,
            seed=args.seed,
        )
        export_model(init_model(cfg), args.out)
    return 0


def _cmd_factors(args) -> int:
    w = _read_dense(args.weights)
    if args.kind == "plain":
        factors = plain_factors(w)
    else:
        factors = robust_factors(w, lo_q=args.lo_q, hi_q=args.hi_q)
    write_tensor(args.out, factors)
    return 0


def _cmd_sparsify(args) -> int:
    x = _read_dense(args.input)
    kind = STRATEGY_TOKENS[args.strategy]
    if kind == "naive_topk":
        strategy = ScoreStrategy.naive_topk()
    else:
        wanted = "plain" if kind == "wanda_like" else "robust"
        if args.factors:
            factors = read_tensor(args.factors)
            if not isinstance(factors, ScoringFactors):
                raise ValidationError(f"{args.factors}: not a scoring-factor container")
            if factors.kind != wanted:
                raise ValidationError(
                    f"{args.factors}: {factors.kind} factors for a {wanted}-factor strategy"
                )
        elif args.weights:
            w = _read_dense(args.weights)
            factors = plain_factors(w) if wanted == "plain" else robust_factors(w)
        else:
            raise ConfigError(f"strategy {args.strategy} needs --weights or --factors")
        strategy = ScoreStrategy(kind, factors)
    sparse, mask = sparsify_with_mask(x, strategy, args.pattern)
    write_tensor(args.out, compress(sparse, args.pattern, mask))
    return 0


def _cmd_quantize(args) -> int:
    t = _read_dense(args.input)
    q, params = quantize(t, args.scheme.replace("-", "_"))
    write_tensor(args.out, q)
    write_tensor(args.scales_out, params.scales.astype(np.float32).reshape(1, -1))
    return 0


def _cmd_smooth_calibrate(args) -> int:
    x = _read_dense(args.calib)
    w = _read_dense(args.weights)
    alpha = args.alpha if args.alpha is not None else (0.10 if args.inverted else 0.5)
    scales = calibrate_smooth_scales(x, w, alpha=alpha, inverted=args.inverted)
    write_tensor(args.out, scales.s.astype(np.float32).reshape(1, -1))
    return 0


def _cmd_spmm_check(args) -> int:
    c = _read_compressed(args.x)
    w = _read_dense(args.w)
    got = spmm(c, w)
    want = matmul(decompress(c), w)
    if not np.array_equal(got.view(np.uint32), want.view(np.uint32)):
        raise ValidationError("sparse kernel disagrees with the dense reference")
    report = flop_report(c, w)
    print(
        f"ok dense_macs={report['dense_macs']} sparse_macs={report['sparse_macs']} "
        f"ratio={fmt_float(report['ratio'])}"
    )
    return 0


def _cmd_sensitivity(args) -> int:
    model = import_model(args.model)
    reports = []
    for path in args.input:
        x = _read_dense(path)
        reports.append(sweep(model, x, args.patterns, args.strategies, args.epsilon))
    merged = average_reports(reports)
    merged.save_csv(args.out)
    print(
        f"sensitivity: {len(merged.entries)} probes, epsilon={fmt_float(args.epsilon)}, "
        f"inputs={merged.num_inputs}",
        file=sys.stderr,
    )
    return 0


def _cmd_plan(args) -> int:
    if (args.pattern is None) != (args.strategy is None):
        raise ConfigError("--pattern and --strategy must be given together")
    report = SensitivityReport.load_csv(args.report)
    if args.pattern is not None:
        report = report.filter(args.pattern, STRATEGY_TOKENS[args.strategy])
    if args.model:
        costs = mac_costs(import_model(args.model).config)
    else:
        costs = {entry.site: 1 for entry in report.entries}
    plan = plan_skips(report, costs, args.budget, args.always_skip)
    plan.save(args.out)
    print(
        f"plan: achieved_fraction={fmt_float(plan.achieved_fraction)} "
        f"skipped={len(plan.skipped)}",
        file=sys.stderr,
    )
    return 0


def _run_config(args) -> pl.PipelineConfig:
    mode = pl.MODE_SPARSE if args.mode == "sparse" else pl.MODE_SPARSE_QUANT
    quant = None
    if mode == pl.MODE_SPARSE_QUANT:
        inverted = not args.no_inverted
        alpha = args.alpha if args.alpha is not None else (0.10 if inverted else 0.5)
        quant = pl.QuantSettings(alpha=alpha, inverted=inverted,
                                 quant_skip_kinds=args.quant_skip)
    order = ORDER_SMOOTH_FIRST if args.order == "smooth-first" else ORDER_SPARSIFY_FIRST
    return pl.PipelineConfig(
        mode=mode,
        pattern=args.pattern,
        strategy_kind=STRATEGY_TOKENS[args.strategy],
        plan=_load_plan(args.plan),
        quant=quant,
        order=order,
        refresh_factors_after_smoothing=not args.reuse_raw_factors,
        epsilon=args.epsilon,
    )


def _cmd_run(args) -> int:
    model = import_model(args.model)
    x = _read_dense(args.input)
    cfg = _run_config(args)
    result = pl.run(model, x, cfg)
    write_tensor(args.out, result.output)
    if args.baseline_out:
        write_tensor(args.baseline_out, result.baseline)
    metrics = [
        cfg.mode,
        str(cfg.pattern),
        cfg.strategy_kind,
        fmt_float(result.e_total),
        fmt_float(result.mac_coverage),
        fmt_float(result.mac_savings),
    ]
    if args.metrics_out:
        write_csv(args.metrics_out, RUN_METRIC_COLUMNS, [metrics])
    print(" ".join(f"{k}={v}" for k, v in zip(RUN_METRIC_COLUMNS, metrics)))
    return 0


def _cmd_compare(args) -> int:
    model = import_model(args.model)
    x = _read_dense(args.input)
    rows = pl.compare_strategies(
        model,
        x,
        args.patterns,
        args.strategies,
        _load_plan(args.plan),
        include_weight_baselines=not args.no_weight_baselines,
        epsilon=args.epsilon,
    )
    pl.save_compare_csv(args.out, rows)
    return 0


def _cmd_heatmap(args) -> int:
    x = _read_dense(args.input)
    emit_heatmap(x, args.out, "abs_gray" if args.mode == "abs" else "signed")
    return 0


_HANDLERS = {
    "gen": _cmd_gen,
    "factors": _cmd_factors,
    "sparsify": _cmd_sparsify,
    "quantize": _cmd_quantize,
    "smooth-calibrate": _cmd_smooth_calibrate,
    "spmm-check": _cmd_spmm_check,
    "sensitivity": _cmd_sensitivity,
    "plan": _cmd_plan,
    "run": _cmd_run,
    "compare": _cmd_compare,
    "heatmap": _cmd_heatmap,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except NMSparseError as exc:
        message = " ".join(str(exc).split())
        print(f"error[{exc.code}]: {message}", file=sys.stderr)
        return 1
    except OSError as exc:
        message = " ".join(str(exc).split())
        print(f"error[io]: {message}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
