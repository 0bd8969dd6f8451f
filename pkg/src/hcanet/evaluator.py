"""Detection metrics: distance to target (mm), false negative and false
positive rates, with a deliberately naive reference scorer for cross-checking.

Per disc and sample, with gt visibility g and a detection d (channel peak >=
threshold): (g, d) is a match contributing its distance, (g, not d) a false
negative, (not g, d) a false positive, (not g, not d) a true negative. FNR is
false negatives over gt-visible slots; FPR is false positives over
gt-not-visible slots (0 when there are none). Distances have no gating radius.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import InputError
from .heatmap_codec import HeatmapStack, KeypointSet, decode_peaks
from .spine_data import NUM_DISCS


@dataclass
class SampleScore:
    """Per-disc outcome of scoring one sample."""

    matched: np.ndarray
    false_neg: np.ndarray
    false_pos: np.ndarray
    dist_px: np.ndarray
    dist_mm: np.ndarray
    threshold: float


@dataclass
class DiscStats:
    count: int
    dtt_mean_mm: Optional[float]
    fn_count: int
    fp_count: int


@dataclass
class MetricsReport:
    dtt_mean_mm: Optional[float]
    dtt_std_mm: Optional[float]
    fnr_pct: float
    fpr_pct: float
    per_disc: list[DiscStats]
    n_samples: int
    threshold: float


def score_sample(
    prediction: HeatmapStack,
    gt: KeypointSet,
    threshold: float,
    scale_to_image: float,
) -> SampleScore:
    """Score one prediction stack against ground truth in heatmap coordinates.

    ``scale_to_image`` is image pixels per heatmap pixel; ``gt.spacing_mm`` is
    millimeters per image pixel, so dist_mm = dist_px * scale_to_image *
    spacing_mm.
    """
    if prediction.num_channels != NUM_DISCS:
        raise InputError(f"expected {NUM_DISCS} channels, got {prediction.num_channels}")
    if len(gt) != NUM_DISCS:
        raise InputError(f"expected {NUM_DISCS} gt keypoints, got {len(gt)}")
    detections = decode_peaks(prediction, threshold)
    matched = np.zeros(NUM_DISCS, dtype=bool)
    false_neg = np.zeros(NUM_DISCS, dtype=bool)
    false_pos = np.zeros(NUM_DISCS, dtype=bool)
    dist_px = np.full(NUM_DISCS, np.nan)
    dist_mm = np.full(NUM_DISCS, np.nan)
    for i in range(NUM_DISCS):
        if gt.visible[i] and detections.visible[i]:
            matched[i] = True
            dist_px[i] = float(np.hypot(*(detections.coords[i] - gt.coords[i])))
            dist_mm[i] = dist_px[i] * scale_to_image * gt.spacing_mm
        elif gt.visible[i]:
            false_neg[i] = True
        elif detections.visible[i]:
            false_pos[i] = True
    return SampleScore(matched, false_neg, false_pos, dist_px, dist_mm, threshold)


def score_sample_bruteforce(
    prediction: HeatmapStack,
    gt: KeypointSet,
    threshold: float,
    scale_to_image: float,
) -> SampleScore:
    """Reference scorer recomputed from the definitions with plain loops.

    Kept independent of decode_peaks on purpose; used to cross-check the fast
    path.
    """
    values = prediction.values.detach().cpu().numpy()
    v, height, width = values.shape
    if v != NUM_DISCS or len(gt) != NUM_DISCS:
        raise InputError("brute-force scorer needs 11 channels and 11 gt keypoints")
    matched = np.zeros(NUM_DISCS, dtype=bool)
    false_neg = np.zeros(NUM_DISCS, dtype=bool)
    false_pos = np.zeros(NUM_DISCS, dtype=bool)
    dist_px = np.full(NUM_DISCS, np.nan)
    dist_mm = np.full(NUM_DISCS, np.nan)
    for i in range(NUM_DISCS):
        best_val = -math.inf
        best_rc = (0, 0)
        for r in range(height):
            for c in range(width):
                val = values[i, r, c]
                if val > best_val:
                    best_val = val
                    best_rc = (r, c)
        detected = best_val >= threshold
        if gt.visible[i] and detected:
            matched[i] = True
            dr = best_rc[0] - gt.coords[i][0]
            dc = best_rc[1] - gt.coords[i][1]
            dist_px[i] = math.sqrt(dr * dr + dc * dc)
            dist_mm[i] = dist_px[i] * scale_to_image * gt.spacing_mm
        elif gt.visible[i]:
            false_neg[i] = True
        elif detected:
            false_pos[i] = True
    return SampleScore(matched, false_neg, false_pos, dist_px, dist_mm, threshold)


def score_batch(
    fused: torch.Tensor,
    keypoints: Sequence[KeypointSet],
    threshold: float,
    scale_to_image: float,
) -> list[SampleScore]:
    """Score a (B, V, h, w) prediction batch against per-sample ground truth."""
    if fused.shape[0] != len(keypoints):
        raise InputError(f"batch size {fused.shape[0]} != {len(keypoints)} keypoint sets")
    return [
        score_sample(HeatmapStack(fused[b]), keypoints[b], threshold, scale_to_image)
        for b in range(fused.shape[0])
    ]


def aggregate(records: Sequence[SampleScore]) -> MetricsReport:
    """Pool per-sample scores into one report.

    DTT statistics pool all matched detections (population std); zero matches
    report the distance fields as None rather than zero.
    """
    if len(records) == 0:
        raise InputError("aggregate needs at least one record")
    thresholds = {r.threshold for r in records}
    if len(thresholds) != 1:
        raise InputError(f"records scored at mixed thresholds: {sorted(thresholds)}")

    all_mm: list[float] = []
    per_disc_mm: list[list[float]] = [[] for _ in range(NUM_DISCS)]
    per_fn = np.zeros(NUM_DISCS, dtype=int)
    per_fp = np.zeros(NUM_DISCS, dtype=int)
    visible_slots = 0
    invisible_slots = 0
    for rec in records:
        for i in range(NUM_DISCS):
            if rec.matched[i]:
                all_mm.append(float(rec.dist_mm[i]))
                per_disc_mm[i].append(float(rec.dist_mm[i]))
                visible_slots += 1
            elif rec.false_neg[i]:
                per_fn[i] += 1
                visible_slots += 1
            elif rec.false_pos[i]:
                per_fp[i] += 1
                invisible_slots += 1
            else:
                invisible_slots += 1

    fn_total = int(per_fn.sum())
    fp_total = int(per_fp.sum())
    fnr = 100.0 * fn_total / visible_slots if visible_slots else 0.0
    fpr = 100.0 * fp_total / invisible_slots if invisible_slots else 0.0
    if all_mm:
        arr = np.sort(np.asarray(all_mm))  # fixed reduce order: permutation-invariant
        dtt_mean, dtt_std = float(arr.mean()), float(arr.std())
    else:
        dtt_mean = dtt_std = None
    per_disc = [
        DiscStats(
            count=len(per_disc_mm[i]),
            dtt_mean_mm=float(np.sort(per_disc_mm[i]).mean()) if per_disc_mm[i] else None,
            fn_count=int(per_fn[i]),
            fp_count=int(per_fp[i]),
        )
        for i in range(NUM_DISCS)
    ]
    return MetricsReport(
        dtt_mean_mm=dtt_mean,
        dtt_std_mm=dtt_std,
        fnr_pct=fnr,
        fpr_pct=fpr,
        per_disc=per_disc,
        n_samples=len(records),
        threshold=float(next(iter(thresholds))),
    )


def report_to_json(report: MetricsReport) -> str:
    return json.dumps(asdict(report), sort_keys=True, indent=2) + "\n"


def _fmt(mean: Optional[float], std: Optional[float] = None) -> str:
    if mean is None:
        return "n/a"
    if std is None:
        return f"{mean:.2f}"
    return f"{mean:.2f}(±{std:.2f})"


def format_table(report: MetricsReport) -> str:
    """Human-readable summary in the mean(±std) / percent column layout."""
    lines = [
        f"{'':10s}{'DTT (mm)':>16s}{'FNR (%)':>10s}{'FPR (%)':>10s}",
        f"{'overall':10s}{_fmt(report.dtt_mean_mm, report.dtt_std_mm):>16s}"
        f"{report.fnr_pct:>10.2f}{report.fpr_pct:>10.2f}",
    ]
    for i, disc in enumerate(report.per_disc):
        lines.append(
            f"{f'disc {i:02d}':10s}{_fmt(disc.dtt_mean_mm):>16s}"
            f"{disc.fn_count:>10d}{disc.fp_count:>10d}"
        )
    lines.append(f"samples: {report.n_samples}   threshold: {report.threshold}")
    return "\n".join(lines)
