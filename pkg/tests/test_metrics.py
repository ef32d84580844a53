import math

import numpy as np
import pytest

from rmamba.metrics import (MetricsRecord, binarize, boundary_pixels,
                            compute_metrics, confusion_counts,
                            hausdorff_distance, mean_metrics)


def oracle_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = bool(pred[i, j]), bool(gt[i, j])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif not p and g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def oracle_boundary(mask):
    """Loop reference: fg pixel with any 8-neighbor outside the mask."""
    h, w = mask.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            edge = False
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    ni, nj = i + di, j + dj
                    if ni < 0 or nj < 0 or ni >= h or nj >= w or not mask[ni, nj]:
                        edge = True
            if edge:
                pts.append((i, j))
    return np.array(pts, dtype=float).reshape(-1, 2)


def oracle_metrics(pred, gt):
    """Brute-force reference mirroring the declared conventions."""
    tp, fp, fn, tn = oracle_confusion(pred, gt)
    both_empty = (tp + fp == 0) and (tp + fn == 0)

    def ratio(num, den):
        if den == 0:
            return 1.0 if both_empty else 0.0
        return num / den

    dice = ratio(2 * tp, 2 * tp + fp + fn)
    iou_fg = ratio(tp, tp + fp + fn)
    iou_bg = 1.0 if (tn + fp + fn) == 0 else tn / (tn + fp + fn)
    precision = ratio(tp, tp + fp)
    recall = ratio(tp, tp + fn)
    f2 = ratio(5 * precision * recall, 4 * precision + recall)
    if pred.any() != gt.any():
        hd = math.hypot(pred.shape[0] - 1, pred.shape[1] - 1)
    elif not pred.any():
        hd = 0.0
    else:
        pa, pb = oracle_boundary(pred), oracle_boundary(gt)
        d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
        hd = max(d.min(axis=1).max(), d.min(axis=0).max())
    return MetricsRecord(dice=dice, miou=0.5 * (iou_fg + iou_bg), recall=recall,
                         precision=precision, f2=f2, hd=float(hd))


def test_confusion_examples():
    gt = np.random.default_rng(0).uniform(size=(8, 8)) > 0.5
    tp, fp, fn, tn = confusion_counts(gt, gt)
    assert fp == 0 and fn == 0 and tp + tn == 64
    tp, fp, fn, tn = confusion_counts(~gt, gt)
    assert tp == 0 and tn == 0


def test_confusion_matches_loop_oracle():
    rng = np.random.default_rng(1)
    pred = rng.uniform(size=(16, 16)) > 0.4
    gt = rng.uniform(size=(16, 16)) > 0.6
    assert confusion_counts(pred, gt) == oracle_confusion(pred, gt)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_counts(np.zeros((2, 2)), np.zeros((3, 3)))


def test_perfect_prediction_record():
    gt = np.zeros((10, 10), dtype=bool)
    gt[2:7, 3:8] = True
    rec = compute_metrics(gt, gt)
    assert rec.dice == rec.miou == rec.precision == rec.recall == rec.f2 == 1.0
    assert rec.hd == 0.0


def test_f2_closed_form():
    # P = 0.5, R = 1: gt is the left half, pred everything
    gt = np.zeros((4, 8), dtype=bool)
    gt[:, :4] = True
    pred = np.ones_like(gt)
    rec = compute_metrics(pred, gt)
    assert abs(rec.precision - 0.5) < 1e-12
    assert rec.recall == 1.0
    assert abs(rec.f2 - 5 * 0.5 / (4 * 0.5 + 1)) < 1e-12


def test_hd_three_four_five():
    a = np.zeros((8, 8), dtype=bool)
    b = np.zeros((8, 8), dtype=bool)
    a[0, 0] = True
    b[3, 4] = True
    assert hausdorff_distance(a, b) == 5.0


def test_hd_symmetry():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(12, 12)) > 0.6
    b = rng.uniform(size=(12, 12)) > 0.6
    assert hausdorff_distance(a, b) == hausdorff_distance(b, a)


def test_empty_mask_conventions():
    empty = np.zeros((6, 6), dtype=bool)
    full = np.ones((6, 6), dtype=bool)
    rec = compute_metrics(empty, empty)
    assert rec.dice == 1.0 and rec.hd == 0.0 and rec.miou == 1.0
    rec = compute_metrics(empty, full)
    assert rec.dice == 0.0
    assert rec.hd == math.hypot(5, 5)


def test_boundary_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mask = rng.uniform(size=(9, 9)) > 0.55
        got = boundary_pixels(mask)
        want = oracle_boundary(mask)
        assert sorted(map(tuple, got.tolist())) == sorted(map(tuple, want.tolist()))


def test_metrics_match_bruteforce_oracle_small():
    rng = np.random.default_rng(4)
    for _ in range(30):
        pred = rng.uniform(size=(32, 32)) > rng.uniform(0.3, 0.7)
        gt = rng.uniform(size=(32, 32)) > rng.uniform(0.3, 0.7)
        got = compute_metrics(pred, gt)
        want = oracle_metrics(pred, gt)
        assert got.hd == want.hd
        for field in ("dice", "miou", "recall", "precision", "f2"):
            assert abs(getattr(got, field) - getattr(want, field)) <= 1e-9


def test_dice_iou_identity():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.uniform(size=(16, 16)) > 0.5
        gt = rng.uniform(size=(16, 16)) > 0.5
        tp, fp, fn, _ = confusion_counts(pred, gt)
        if tp + fp + fn == 0:
            continue
        iou = tp / (tp + fp + fn)
        rec = compute_metrics(pred, gt)
        assert abs(rec.dice - 2 * iou / (1 + iou)) < 1e-12


def test_threshold_monotonicity_of_recall():
    rng = np.random.default_rng(6)
    probs = rng.uniform(size=(32, 32))
    gt = rng.uniform(size=(32, 32)) > 0.5
    recalls = []
    for thr in (0.1, 0.3, 0.5, 0.7, 0.9):
        rec = compute_metrics(binarize(probs, thr), gt)
        recalls.append(rec.recall)
    assert all(a >= b - 1e-12 for a, b in zip(recalls, recalls[1:]))


def test_mean_metrics():
    a = MetricsRecord(1.0, 1.0, 1.0, 1.0, 1.0, 0.0)
    b = MetricsRecord(0.0, 0.0, 0.0, 0.0, 0.0, 2.0)
    m = mean_metrics([a, b])
    assert m.dice == 0.5 and m.hd == 1.0
    with pytest.raises(ValueError):
        mean_metrics([])
