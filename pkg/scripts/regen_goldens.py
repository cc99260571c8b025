#!/usr/bin/env python3
"""Regenerate the recorded regression fixtures under tests/golden/.

Run from the repository root after intentional numeric changes:

    python3 scripts/regen_goldens.py

Fixtures are deterministic functions of fixed seeds; committing them pins
bit-level behavior so later edits that drift the numerics fail loudly.
"""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from nmsparse.masking import NMPattern  # noqa: E402
from nmsparse.pipeline import (  # noqa: E402
    MODE_SPARSE,
    PipelineConfig,
    compare_strategies,
    run,
)
from nmsparse.quantization import w8a8_linear  # noqa: E402
from nmsparse.sensitivity import plan_skips, sweep  # noqa: E402
from nmsparse.tensor_core import seeded_uniform, tensor_digest  # noqa: E402
from nmsparse.sensitivity import SkipPlan  # noqa: E402
from nmsparse.toy_model import ToyConfig, init_model  # noqa: E402

GOLDEN_DIR = ROOT / "tests" / "golden"


def model_checksum(model) -> str:
    h = hashlib.sha256()
    for site in model.sites():
        h.update(tensor_digest(model.weight(site)).encode("ascii"))
    return h.hexdigest()


def main() -> None:
    GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
    cfg = ToyConfig()
    model = init_model(cfg)
    x = seeded_uniform(cfg.seq_len, cfg.d_model, -1.0, 1.0, 0)

    # Quantized-linear error on the fixed fixture; the bound doubles the
    # observed value so the regression has headroom for benign drift.
    xa = seeded_uniform(16, 32, -1.0, 1.0, 31)
    wa = seeded_uniform(32, 16, -1.0, 1.0, 32)
    ref = xa.astype(np.float64) @ wa.astype(np.float64)
    got = w8a8_linear(xa, wa).astype(np.float64)
    w8a8_err = float(np.linalg.norm(got - ref) / np.linalg.norm(ref))

    # Canonical sweep: every site, 2:4, naive and channel-weighted scoring.
    report = sweep(model, x, [NMPattern(2, 4)], ["naive_topk", "wanda_like"])
    report.save_csv(GOLDEN_DIR / "sweep_seed0.csv")

    # Budgeted 8:16 run: plan from a naive 8:16 sweep with uniform costs.
    report_816 = sweep(model, x, [NMPattern(8, 16)], ["naive_topk"])
    plan = plan_skips(
        report_816, {s: 1 for s in model.sites()}, 0.55, ("k_proj", "v_proj")
    )
    result = run(
        model, x, PipelineConfig(MODE_SPARSE, NMPattern(8, 16), "naive_topk", plan)
    )

    # Strategy comparison at 2:4 with full coverage (direction regression).
    full = SkipPlan(frozenset(), frozenset(), 1.0, 1.0)
    rows = compare_strategies(
        model,
        x,
        [NMPattern(2, 4)],
        ["naive_topk", "wanda_like"],
        full,
        include_weight_baselines=False,
    )

    goldens = {
        "seed0_model_checksum": model_checksum(model),
        "w8a8_seed31_error": w8a8_err,
        "w8a8_seed31_error_bound": 2.0 * w8a8_err,
        "run_8_16_plan_achieved": plan.achieved_fraction,
        "run_8_16_e_total": result.e_total,
        "run_8_16_mac_coverage": result.mac_coverage,
        "compare_2_4": {row.strategy: row.e_total for row in rows},
    }
    out = GOLDEN_DIR / "goldens.json"
    out.write_text(json.dumps(goldens, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    print(f"wrote {GOLDEN_DIR / 'sweep_seed0.csv'}")


if __name__ == "__main__":
    main()
