import json

import numpy as np
import pytest
import torch

from hcanet.errors import InputError
from hcanet.evaluator import (
    DiscStats,
    MetricsReport,
    aggregate,
    format_table,
    report_to_json,
    score_sample,
    score_sample_bruteforce,
)
from hcanet.heatmap_codec import HeatmapStack, KeypointSet, encode_heatmaps
from hcanet.spine_data import NUM_DISCS


def random_case(rng, h=16, w=16):
    values = torch.as_tensor(rng.uniform(0, 1, size=(NUM_DISCS, h, w)), dtype=torch.float32)
    coords = np.stack([rng.uniform(0, h - 1, NUM_DISCS), rng.uniform(0, w - 1, NUM_DISCS)], axis=1)
    visible = rng.random(NUM_DISCS) > 0.25
    gt = KeypointSet(coords, visible, spacing_mm=float(rng.uniform(0.3, 1.5)))
    threshold = float(rng.uniform(0.1, 0.9))
    return HeatmapStack(values), gt, threshold


def assert_scores_equal(a, b):
    np.testing.assert_array_equal(a.matched, b.matched)
    np.testing.assert_array_equal(a.false_neg, b.false_neg)
    np.testing.assert_array_equal(a.false_pos, b.false_pos)
    for i in range(NUM_DISCS):
        if a.matched[i]:
            assert abs(a.dist_mm[i] - b.dist_mm[i]) <= 1e-9
            assert abs(a.dist_px[i] - b.dist_px[i]) <= 1e-9


class TestScoreSample:
    def test_perfect_prediction(self, rng):
        coords = np.stack([rng.uniform(0, 15, NUM_DISCS), rng.uniform(0, 15, NUM_DISCS)], axis=1).round()
        gt = KeypointSet(coords, [True] * NUM_DISCS, spacing_mm=0.7)
        stack = encode_heatmaps(gt, 16, 16, sigma=2.0)
        score = score_sample(stack, gt, threshold=0.5, scale_to_image=4.0)
        assert score.matched.all()
        assert not score.false_neg.any() and not score.false_pos.any()
        assert np.nanmax(score.dist_mm) == 0.0

    def test_displacement_arithmetic(self):
        coords = np.zeros((NUM_DISCS, 2))
        coords[:, 0] = np.arange(NUM_DISCS)
        visible = np.zeros(NUM_DISCS, dtype=bool)
        visible[0] = True
        gt = KeypointSet(coords, visible, spacing_mm=0.5)
        values = torch.zeros(NUM_DISCS, 16, 16)
        values[0, 3, 0] = 1.0  # 3 heatmap px below gt at (0, 0)
        score = score_sample(HeatmapStack(values), gt, threshold=0.5, scale_to_image=4.0)
        assert score.matched[0]
        assert score.dist_mm[0] == pytest.approx(6.0, abs=1e-12)

    def test_outcome_classification(self):
        coords = np.zeros((NUM_DISCS, 2))
        visible = np.zeros(NUM_DISCS, dtype=bool)
        visible[:2] = True  # disc 0 detected, disc 1 missed, disc 2 false positive
        gt = KeypointSet(coords, visible, spacing_mm=1.0)
        values = torch.zeros(NUM_DISCS, 8, 8)
        values[0, 0, 0] = 1.0
        values[2, 4, 4] = 1.0
        score = score_sample(HeatmapStack(values), gt, threshold=0.5, scale_to_image=4.0)
        assert score.matched[0] and score.false_neg[1] and score.false_pos[2]
        assert not score.matched[3:].any()

    def test_wrong_channel_count_rejected(self):
        gt = KeypointSet(np.zeros((NUM_DISCS, 2)), [True] * NUM_DISCS)
        with pytest.raises(InputError):
            score_sample(HeatmapStack(torch.zeros(5, 8, 8)), gt, 0.5, 4.0)

    def test_matches_bruteforce_scorer(self, rng):
        for _ in range(30):
            stack, gt, threshold = random_case(rng)
            fast = score_sample(stack, gt, threshold, scale_to_image=4.0)
            slow = score_sample_bruteforce(stack, gt, threshold, scale_to_image=4.0)
            assert_scores_equal(fast, slow)


class TestAggregate:
    def test_single_perfect_sample(self, rng):
        coords = np.stack([rng.uniform(0, 15, NUM_DISCS), rng.uniform(0, 15, NUM_DISCS)], axis=1).round()
        gt = KeypointSet(coords, [True] * NUM_DISCS)
        stack = encode_heatmaps(gt, 16, 16, sigma=2.0)
        report = aggregate([score_sample(stack, gt, 0.5, 4.0)])
        assert (report.dtt_mean_mm, report.dtt_std_mm) == (0.0, 0.0)
        assert (report.fnr_pct, report.fpr_pct) == (0.0, 0.0)
        assert report.n_samples == 1

    def test_two_point_statistics(self):
        # one sample with two matches at 1 mm and 3 mm
        visible = np.zeros(NUM_DISCS, dtype=bool)
        visible[:2] = True
        coords = np.zeros((NUM_DISCS, 2))
        coords[0] = (0.0, 1.0)
        coords[1] = (3.0, 0.0)
        gt = KeypointSet(coords, visible, spacing_mm=1.0)
        values = torch.zeros(NUM_DISCS, 8, 8)
        values[0, 0, 0] = 1.0
        values[1, 0, 0] = 1.0
        report = aggregate([score_sample(HeatmapStack(values), gt, 0.5, scale_to_image=1.0)])
        assert report.dtt_mean_mm == pytest.approx(2.0, abs=1e-12)
        assert report.dtt_std_mm == pytest.approx(1.0, abs=1e-12)

    def test_zero_detections_report_absent_marker(self):
        gt = KeypointSet(np.zeros((NUM_DISCS, 2)), [True] * NUM_DISCS)
        report = aggregate([score_sample(HeatmapStack(torch.zeros(NUM_DISCS, 8, 8)), gt, 0.5, 4.0)])
        assert report.dtt_mean_mm is None
        assert report.dtt_std_mm is None
        assert report.fnr_pct == 100.0

    def test_counts_reconcile_per_disc(self, rng):
        records = []
        for _ in range(12):
            stack, gt, _ = random_case(rng)
            records.append(score_sample(stack, gt, 0.4, 4.0))
        report = aggregate(records)
        total_matched = sum(r.matched.sum() for r in records)
        assert sum(d.count for d in report.per_disc) == total_matched
        assert sum(d.fn_count for d in report.per_disc) == sum(r.false_neg.sum() for r in records)
        assert sum(d.fp_count for d in report.per_disc) == sum(r.false_pos.sum() for r in records)

    def test_permutation_invariance(self, rng):
        records = [score_sample(*random_case(rng)[:2], 0.4, 4.0) for _ in range(8)]
        a = aggregate(records)
        b = aggregate(list(reversed(records)))
        assert report_to_json(a) == report_to_json(b)

    def test_empty_and_mixed_threshold_rejected(self, rng):
        with pytest.raises(InputError):
            aggregate([])
        stack, gt, _ = random_case(rng)
        with pytest.raises(InputError):
            aggregate([score_sample(stack, gt, 0.3, 4.0), score_sample(stack, gt, 0.5, 4.0)])


class TestThresholdSweep:
    def test_fnr_fpr_monotone_in_threshold(self, rng):
        cases = [random_case(rng) for _ in range(10)]
        fnrs, fprs = [], []
        for threshold in np.linspace(0.05, 0.95, 10):
            records = [score_sample(stack, gt, float(threshold), 4.0) for stack, gt, _ in cases]
            report = aggregate(records)
            fnrs.append(report.fnr_pct)
            fprs.append(report.fpr_pct)
        # raising the threshold can only miss more discs and fire fewer false positives
        assert all(a <= b + 1e-12 for a, b in zip(fnrs, fnrs[1:]))
        assert all(a >= b - 1e-12 for a, b in zip(fprs, fprs[1:]))


class TestReporting:
    def _headline_report(self):
        per_disc = [DiscStats(count=10, dtt_mean_mm=1.2, fn_count=0, fp_count=0)] * NUM_DISCS
        return MetricsReport(
            dtt_mean_mm=1.19, dtt_std_mm=1.08, fnr_pct=0.3, fpr_pct=0.0,
            per_disc=per_disc, n_samples=121, threshold=0.25,
        )

    def test_table_uses_mean_pm_std_convention(self):
        table = format_table(self._headline_report())
        assert "1.19(±1.08)" in table
        assert "DTT (mm)" in table and "FNR (%)" in table and "FPR (%)" in table

    def test_json_roundtrip_is_stable(self, rng):
        stack, gt, threshold = random_case(rng)
        report = aggregate([score_sample(stack, gt, threshold, 4.0)])
        text = report_to_json(report)
        reparsed = json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"
        assert reparsed == text
