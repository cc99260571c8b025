"""Tests for sensitivity probes, sweeps, and the skip planner."""

import numpy as np
import pytest

from nmsparse.errors import DomainError, PlanningError
from nmsparse.masking import NMPattern, ScoreStrategy
from nmsparse.sensitivity import (
    SensitivityEntry,
    SensitivityReport,
    SkipPlan,
    average_reports,
    plan_skips,
    relative_error,
    site_sensitivity,
    sweep,
)
from nmsparse.tensor_core import seeded_uniform
from nmsparse.toy_model import (
    ProjectionSite,
    SiteConfig,
    SparsifySpec,
    ToyConfig,
    forward,
    init_model,
)

CFG = ToyConfig()
MODEL = init_model(CFG)
X_EMBED = seeded_uniform(CFG.seq_len, CFG.d_model, -1.0, 1.0, 0)


class TestRelativeError:
    def test_identical_outputs_zero(self):
        y = seeded_uniform(4, 4, -1.0, 1.0, 1)
        assert relative_error(y, y) == 0.0

    def test_zero_baseline_stays_finite(self):
        y = np.zeros((3, 3), dtype=np.float32)
        yp = np.ones((3, 3), dtype=np.float32)
        e = relative_error(y, yp, epsilon=1e-8)
        assert np.isfinite(e) and e > 0

    def test_joint_scaling_invariance_without_stabilizer(self):
        y = seeded_uniform(5, 5, -1.0, 1.0, 2).astype(np.float64)
        yp = y + seeded_uniform(5, 5, -0.1, 0.1, 3).astype(np.float64)
        base = relative_error(y, yp, epsilon=0.0)
        scaled = relative_error(4.0 * y, 4.0 * yp, epsilon=0.0)
        assert scaled == pytest.approx(base, rel=1e-12)


class TestSiteSensitivity:
    def test_full_keep_probe_is_exactly_zero(self):
        for site in (ProjectionSite(0, "q_proj"), ProjectionSite(2, "down_proj")):
            e = site_sensitivity(MODEL, X_EMBED, site, NMPattern(4, 4), "naive_topk")
            assert e == 0.0

    def test_matches_two_forward_pass_script(self):
        # Independent replay: run both passes by hand and apply the formula.
        site = ProjectionSite(0, "q_proj")
        pattern = NMPattern(2, 4)
        got = site_sensitivity(MODEL, X_EMBED, site, pattern, "naive_topk")
        dense = forward(MODEL, X_EMBED).astype(np.float64)
        cfg = {site: SiteConfig(SparsifySpec(pattern, ScoreStrategy.naive_topk()))}
        probed = forward(MODEL, X_EMBED, cfg).astype(np.float64)
        want = float(
            np.linalg.norm(dense - probed) / (np.linalg.norm(dense) + 1e-8)
        )
        assert got == pytest.approx(want, abs=1e-7)

    def test_positive_for_real_pruning(self):
        e = site_sensitivity(
            MODEL, X_EMBED, ProjectionSite(1, "gate_proj"), NMPattern(2, 4), "naive_topk"
        )
        assert e > 0.0


class TestSweep:
    def test_degenerate_sweep_equals_single_probe(self):
        site = ProjectionSite(0, "up_proj")
        report = sweep(MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"], sites=[site])
        assert len(report.entries) == 1
        entry = report.entries[0]
        want = site_sensitivity(MODEL, X_EMBED, site, NMPattern(2, 4), "naive_topk")
        assert (entry.site, entry.e) == (site, want)

    def test_kind_averages_recompute_from_entries(self):
        report = sweep(MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"])
        averages = report.kind_averages(NMPattern(2, 4), "naive_topk")
        for kind, mean_e in averages.items():
            es = [e.e for e in report.entries if e.site.kind == kind]
            assert mean_e == pytest.approx(float(np.mean(es)), abs=1e-9)

    def test_rerun_identical(self):
        a = sweep(MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"])
        b = sweep(MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"])
        assert a.entries == b.entries

    def test_csv_round_trip(self, tmp_path):
        report = sweep(
            MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk", "wanda_like"],
            sites=MODEL.sites()[:4],
        )
        p = tmp_path / "report.csv"
        report.save_csv(p)
        back = SensitivityReport.load_csv(p)
        assert back.entries == report.entries


class TestAverageReports:
    def test_mean_and_input_count(self):
        site = ProjectionSite(0, "q_proj")
        r1 = SensitivityReport(
            (SensitivityEntry(site, NMPattern(2, 4), "naive_topk", 0.2),)
        )
        r2 = SensitivityReport(
            (SensitivityEntry(site, NMPattern(2, 4), "naive_topk", 0.4),)
        )
        merged = average_reports([r1, r2])
        assert merged.entries[0].e == pytest.approx(0.3)
        assert merged.num_inputs == 2

    def test_mismatched_probes_rejected(self):
        site = ProjectionSite(0, "q_proj")
        r1 = SensitivityReport(
            (SensitivityEntry(site, NMPattern(2, 4), "naive_topk", 0.2),)
        )
        r2 = SensitivityReport(
            (SensitivityEntry(site, NMPattern(4, 8), "naive_topk", 0.2),)
        )
        with pytest.raises(DomainError):
            average_reports([r1, r2])


def _report(entries):
    return SensitivityReport(
        tuple(
            SensitivityEntry(site, NMPattern(2, 4), "naive_topk", e)
            for site, e in entries
        )
    )


class TestPlanSkips:
    SITES = [
        ProjectionSite(0, "q_proj"),
        ProjectionSite(0, "o_proj"),
        ProjectionSite(0, "gate_proj"),
    ]

    def test_greedy_on_three_site_fixture(self):
        # Uniform costs, budget one-third: everything above the lowest-e
        # site gets un-sparsified, in descending-e order.
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        costs = {s: 10 for s in self.SITES}
        plan = plan_skips(report, costs, budget=1.0 / 3.0)
        assert plan.skipped == {self.SITES[0], self.SITES[2]}
        assert plan.is_covered(self.SITES[1])
        assert plan.achieved_fraction == pytest.approx(1.0 / 3.0)

    def test_always_skip_kinds_never_sparsified(self):
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        costs = {s: 10 for s in self.SITES}
        plan = plan_skips(
            report, costs, budget=0.3, always_skip=("q_proj", "gate_proj")
        )
        assert not plan.is_covered(self.SITES[0])
        assert not plan.is_covered(self.SITES[2])

    def test_budget_one_means_no_skips(self):
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        costs = {s: 7 for s in self.SITES}
        plan = plan_skips(report, costs, budget=1.0)
        assert plan.skipped == frozenset()
        assert plan.achieved_fraction == 1.0

    def test_unreachable_budget_reports_max(self):
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        costs = {s: 10 for s in self.SITES}
        with pytest.raises(PlanningError, match="0.66"):
            plan_skips(report, costs, budget=0.9, always_skip=("q_proj",))

    def test_tie_breaks_protect_deeper_layers(self):
        sites = [ProjectionSite(0, "q_proj"), ProjectionSite(3, "q_proj")]
        report = _report(zip(sites, [0.5, 0.5]))
        costs = {s: 10 for s in sites}
        plan = plan_skips(report, costs, budget=0.5)
        assert plan.skipped == {sites[1]}

    def test_multi_slice_report_rejected(self):
        site = ProjectionSite(0, "q_proj")
        report = SensitivityReport(
            (
                SensitivityEntry(site, NMPattern(2, 4), "naive_topk", 0.2),
                SensitivityEntry(site, NMPattern(4, 8), "naive_topk", 0.1),
            )
        )
        with pytest.raises(PlanningError, match="slices"):
            plan_skips(report, {site: 1}, budget=0.5)

    def test_no_beneficial_single_swap_on_toy_model(self):
        report = sweep(MODEL, X_EMBED, [NMPattern(2, 4)], ["naive_topk"])
        costs = {s: 1 for s in MODEL.sites()}
        plan = plan_skips(report, costs, budget=0.55, always_skip=("k_proj", "v_proj"))
        assert plan.achieved_fraction >= 0.55
        e = {entry.site: entry.e for entry in report.entries}
        covered = [s for s in MODEL.sites() if plan.is_covered(s)]
        chosen_skips = [
            s for s in plan.skipped if s.kind not in plan.always_skip_kinds
        ]
        # Every discretionary skip protects a site at least as sensitive as
        # anything still sparsified.
        for skipped in chosen_skips:
            for live in covered:
                assert e[skipped] >= e[live]

    def test_plan_json_round_trip(self, tmp_path):
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        costs = {s: 10 for s in self.SITES}
        plan = plan_skips(report, costs, budget=1.0 / 3.0, always_skip=("k_proj",))
        p = tmp_path / "plan.json"
        plan.save(p)
        back = SkipPlan.load(p)
        assert back == plan
        plan.save(tmp_path / "again.json")
        assert (tmp_path / "plan.json").read_bytes() == (
            tmp_path / "again.json"
        ).read_bytes()

    def test_bad_budget(self):
        report = _report(zip(self.SITES, [0.5, 0.1, 0.9]))
        with pytest.raises(DomainError):
            plan_skips(report, {s: 1 for s in self.SITES}, budget=0.0)
