"""Relative-perturbation sensitivity analysis and the skip planner.

Each probe sparsifies the input of a single projection site, reruns the
full forward pass, and reports the relative Frobenius deviation of the
final output.  Probes are independent pure computations; a sweep collects
one entry per (site, pattern, strategy) plus per-projection-kind averages.
The planner turns a sweep into a skip set: it un-sparsifies the most
sensitive sites while the accelerated share of linear multiply-accumulates
stays at or above the requested budget, preferring to protect deeper
layers on ties.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, PlanningError
from .masking import NMPattern, ScoreStrategy
from .scoring import plain_factors, robust_factors
from .toy_model import (
    PROJECTION_KINDS,
    ModelWeights,
    ProjectionSite,
    SiteConfig,
    SparsifySpec,
    forward,
)

__all__ = [
    "DEFAULT_EPSILON",
    "SensitivityEntry",
    "SensitivityReport",
    "SkipPlan",
    "relative_error",
    "strategy_for_weight",
    "site_sensitivity",
    "sweep",
    "average_reports",
    "plan_skips",
]

DEFAULT_EPSILON = 1e-8

REPORT_COLUMNS = ["site_layer", "site_kind", "n", "m", "strategy", "e"]


def relative_error(y, y_prime, epsilon: float = DEFAULT_EPSILON) -> float:
    """||Y - Y'||_F / (||Y||_F + epsilon), in float64."""
    a = np.asarray(y, dtype=np.float64)
    b = np.asarray(y_prime, dtype=np.float64)
    return float(np.linalg.norm(a - b) / (np.linalg.norm(a) + epsilon))


def strategy_for_weight(kind: str, w) -> ScoreStrategy:
    """Concrete scoring strategy for one site's weight tensor."""
    if kind == "naive_topk":
        return ScoreStrategy.naive_topk()
    if kind == "wanda_like":
        return ScoreStrategy.wanda_like(plain_factors(w))
    if kind == "robust_norm":
        return ScoreStrategy.robust_norm(robust_factors(w))
    raise DomainError(f"unknown strategy kind {kind!r}")


@dataclass(frozen=True)
class SensitivityEntry:
    site: ProjectionSite
    pattern: NMPattern
    strategy: str
    e: float


@dataclass(frozen=True)
class SensitivityReport:
    entries: tuple[SensitivityEntry, ...]
    epsilon: float | None = DEFAULT_EPSILON
    num_inputs: int = 1

    def slices(self) -> list[tuple[NMPattern, str]]:
        seen = []
        for entry in self.entries:
            key = (entry.pattern, entry.strategy)
            if key not in seen:
                seen.append(key)
        return seen

    def filter(self, pattern: NMPattern, strategy: str) -> "SensitivityReport":
        kept = tuple(
            e for e in self.entries if e.pattern == pattern and e.strategy == strategy
        )
        return replace(self, entries=kept)

    def kind_averages(self, pattern: NMPattern, strategy: str) -> dict[str, float]:
        """Mean e per projection kind within one (pattern, strategy) slice."""
        sums: dict[str, list[float]] = {}
        for entry in self.filter(pattern, strategy).entries:
            sums.setdefault(entry.site.kind, []).append(entry.e)
        return {kind: float(np.mean(es)) for kind, es in sums.items()}

    def to_csv_rows(self) -> list[list]:
        from .tensor_io import fmt_float

        return [
            [
                entry.site.layer,
                entry.site.kind,
                entry.pattern.n,
                entry.pattern.m,
                entry.strategy,
                fmt_float(entry.e),
            ]
            for entry in self.entries
        ]

    def save_csv(self, path) -> None:
        from .tensor_io import write_csv

        write_csv(path, REPORT_COLUMNS, self.to_csv_rows())

    @classmethod
    def load_csv(cls, path) -> "SensitivityReport":
        import csv as _csv

        from .errors import FormatError

        with open(path, newline="", encoding="utf-8") as fh:
            reader = _csv.reader(fh)
            header = next(reader, None)
            if header != REPORT_COLUMNS:
                raise FormatError(f"{path}: unexpected report columns {header}")
            entries = []
            for lineno, row in enumerate(reader, start=2):
                try:
                    layer, kind, n, m, strategy, e = row
                    entries.append(
                        SensitivityEntry(
                            ProjectionSite(int(layer), kind),
                            NMPattern(int(n), int(m)),
                            strategy,
                            float(e),
                        )
                    )
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: malformed report row") from None
        return cls(tuple(entries), epsilon=None)


def site_sensitivity(
    model: ModelWeights,
    x_embed,
    site: ProjectionSite,
    pattern: NMPattern,
    strategy_kind: str,
    epsilon: float = DEFAULT_EPSILON,
    baseline: np.ndarray | None = None,
    strategy: ScoreStrategy | None = None,
) -> float:
    """Deviation of the final output when only ``site`` is sparsified."""
    if baseline is None:
        baseline = forward(model, x_embed)
    if strategy is None:
        strategy = strategy_for_weight(strategy_kind, model.weight(site))
    cfg = {site: SiteConfig(sparsify=SparsifySpec(pattern, strategy))}
    return relative_error(baseline, forward(model, x_embed, cfg), epsilon)


def sweep(
    model: ModelWeights,
    x_embed,
    patterns,
    strategies,
    epsilon: float = DEFAULT_EPSILON,
    sites=None,
) -> SensitivityReport:
    """One probe per (site, pattern, strategy kind); baseline computed once."""
    sites = list(sites) if sites is not None else model.sites()
    baseline = forward(model, x_embed)
    strategy_cache: dict[tuple[ProjectionSite, str], ScoreStrategy] = {}
    entries = []
    for site in sites:
        for pattern in patterns:
            for kind in strategies:
                key = (site, kind)
                if key not in strategy_cache:
                    strategy_cache[key] = strategy_for_weight(kind, model.weight(site))
                e = site_sensitivity(
                    model,
                    x_embed,
                    site,
                    pattern,
                    kind,
                    epsilon,
                    baseline=baseline,
                    strategy=strategy_cache[key],
                )
                entries.append(SensitivityEntry(site, pattern, kind, e))
    return SensitivityReport(tuple(entries), epsilon=epsilon)


def average_reports(reports: list[SensitivityReport]) -> SensitivityReport:
    """Entry-wise arithmetic mean over reports with identical probe keys."""
    if not reports:
        raise DomainError("no reports to average")
    first = reports[0]
    keys = [(e.site, e.pattern, e.strategy) for e in first.entries]
    for other in reports[1:]:
        if [(e.site, e.pattern, e.strategy) for e in other.entries] != keys:
            raise DomainError("reports cover different probes; cannot average")
    entries = []
    for i, entry in enumerate(first.entries):
        mean_e = float(np.mean([r.entries[i].e for r in reports]))
        entries.append(replace(entry, e=mean_e))
    return SensitivityReport(
        tuple(entries),
        epsilon=first.epsilon,
        num_inputs=sum(r.num_inputs for r in reports),
    )


@dataclass(frozen=True)
class SkipPlan:
    """Sites excluded from sparsification plus the coverage bookkeeping."""

    skipped: frozenset[ProjectionSite]
    always_skip_kinds: frozenset[str]
    budget: float
    achieved_fraction: float

    def is_covered(self, site: ProjectionSite) -> bool:
        return site.kind not in self.always_skip_kinds and site not in self.skipped

    def to_json(self) -> str:
        payload = {
            "budget": self.budget,
            "achieved_fraction": self.achieved_fraction,
            "always_skip_kinds": sorted(self.always_skip_kinds),
            "skipped": [
                {"layer": s.layer, "kind": s.kind}
                for s in sorted(self.skipped, key=lambda s: (s.layer, s.kind))
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SkipPlan":
        from .errors import FormatError

        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(
                skipped=frozenset(
                    ProjectionSite(s["layer"], s["kind"]) for s in payload["skipped"]
                ),
                always_skip_kinds=frozenset(payload["always_skip_kinds"]),
                budget=float(payload["budget"]),
                achieved_fraction=float(payload["achieved_fraction"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: not a valid plan file ({exc})") from None


def plan_skips(
    report: SensitivityReport,
    mac_costs: dict[ProjectionSite, int],
    budget: float,
    always_skip=(),
) -> SkipPlan:
    """Greedy budget-constrained skip selection.

    Starting from every non-always-skip site sparsified, repeatedly
    un-sparsify the remaining site with the highest deviation while the
    covered fraction of total MACs stays at or above ``budget``.  Ties
    prefer protecting higher layer indices, then lower kind names.
    """
    if not 0.0 < budget <= 1.0:
        raise DomainError(f"budget {budget} outside (0, 1]")
    always_skip = frozenset(always_skip)
    for kind in always_skip:
        if kind not in PROJECTION_KINDS:
            raise DomainError(f"unknown projection kind {kind!r}")
    slices = report.slices()
    if len(slices) != 1:
        raise PlanningError(
            f"report holds {len(slices)} (pattern, strategy) slices; filter to one"
        )
    e_by_site = {entry.site: entry.e for entry in report.entries}
    total = sum(mac_costs.values())
    if total <= 0:
        raise PlanningError("total MAC cost is zero")
    candidates = [s for s in mac_costs if s.kind not in always_skip]
    missing = [s for s in candidates if s not in e_by_site]
    if missing:
        raise PlanningError(f"report lacks entries for sites: {missing[:3]}")

    covered = sum(mac_costs[s] for s in candidates)
    fraction = covered / total
    if fraction < budget:
        raise PlanningError(
            f"budget {budget} unreachable: max achievable fraction is {fraction:.6f}"
        )
    # Highest e first; ties protect deeper layers, then earlier kind names.
    queue = sorted(
        candidates, key=lambda s: (-e_by_site[s], -s.layer, s.kind)
    )
    skipped = {s for s in mac_costs if s.kind in always_skip}
    for site in queue:
        without = covered - mac_costs[site]
        if without / total >= budget:
            covered = without
            skipped.add(site)
        else:
            break
    return SkipPlan(
        skipped=frozenset(skipped),
        always_skip_kinds=always_skip,
        budget=budget,
        achieved_fraction=covered / total,
    )
