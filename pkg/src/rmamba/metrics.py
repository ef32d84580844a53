"""Evaluation metrics for binary masks.

Conventions (declared, and mirrored by the brute-force test oracles):
  * masks binarized upstream at threshold 0.5;
  * Hausdorff distance is the full symmetric maximum over 8-connected
    boundary pixels under Euclidean distance, in pixel units; a foreground
    pixel on the image border counts as boundary;
  * both masks empty: overlap metrics 1.0 and HD 0.0; exactly one empty:
    overlap metrics 0.0 and HD = image diagonal (finite sentinel, logged).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)


@dataclass
class MetricsRecord:
    dice: float
    miou: float
    recall: float
    precision: float
    f2: float
    hd: float

    FIELDS = ("dice", "miou", "recall", "precision", "f2", "hd")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def confusion_counts(pred_mask, gt_mask):
    """(TP, FP, FN, TN) as exact integers."""
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_counts: shape mismatch {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return tp, fp, fn, tn


def boundary_pixels(mask):
    """Coordinates of foreground pixels with a background 8-neighbor.

    Pixels touching the image border are boundary (outside counts as
    background). Returns an [K, 2] int array of (row, col).
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.empty((0, 2), dtype=np.int64)
    p = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for di in (0, 1, 2):
        for dj in (0, 1, 2):
            interior &= p[di:di + m.shape[0], dj:dj + m.shape[1]]
    return np.argwhere(m & ~interior)


def hausdorff_distance(mask_a, mask_b):
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"hausdorff_distance: shape mismatch {a.shape} vs {b.shape}")
    a_any, b_any = bool(a.any()), bool(b.any())
    if not a_any and not b_any:
        return 0.0
    if a_any != b_any:
        h, w = a.shape[-2:]
        sentinel = math.hypot(h - 1, w - 1)
        log.warning("hausdorff: one mask empty, reporting image diagonal %.3f px", sentinel)
        return sentinel
    pa = boundary_pixels(a).astype(np.float64)
    pb = boundary_pixels(b).astype(np.float64)
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba))


def _safe_ratio(num, denom, both_empty):
    if denom == 0:
        return 1.0 if both_empty else 0.0
    return num / denom


def compute_metrics(pred_mask, gt_mask) -> MetricsRecord:
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    tp, fp, fn, tn = confusion_counts(pred, gt)
    both_empty = (tp + fp == 0) and (tp + fn == 0)
    dice = _safe_ratio(2.0 * tp, 2.0 * tp + fp + fn, both_empty)
    iou_fg = _safe_ratio(tp, tp + fp + fn, both_empty)
    iou_bg = 1.0 if tn + fp + fn == 0 else tn / (tn + fp + fn)
    miou = 0.5 * (iou_fg + iou_bg)
    precision = _safe_ratio(tp, tp + fp, both_empty)
    recall = _safe_ratio(tp, tp + fn, both_empty)
    f2 = _safe_ratio(5.0 * precision * recall, 4.0 * precision + recall, both_empty)
    hd = hausdorff_distance(pred, gt)
    return MetricsRecord(dice=dice, miou=miou, recall=recall, precision=precision, f2=f2, hd=hd)


def mean_metrics(records) -> MetricsRecord:
    records = list(records)
    if not records:
        raise ValueError("mean_metrics: no records")
    return MetricsRecord(*[float(np.mean([getattr(r, f) for r in records]))
                           for f in MetricsRecord.FIELDS])


def binarize(prob_map, threshold=0.5):
    return np.asarray(prob_map) >= threshold
