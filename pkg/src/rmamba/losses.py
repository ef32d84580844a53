"""Training losses on probability maps."""
from __future__ import annotations

from .decoder import PredictionSet
from .tensor import as_tensor, bilinear_resize, clamp, log, tsum

EPS_CLAMP = 1e-7
EPS_DENOM = 1e-7


def bce_loss(pred, target):
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"bce_loss: shape mismatch {pred.shape} vs {target.shape}")
    p = clamp(pred, EPS_CLAMP, 1.0 - EPS_CLAMP)
    ll = target * log(p) + (1.0 - target) * log(1.0 - p)
    return -ll.mean()


def dice_loss(pred, target):
    """1 - soft Dice overlap; small denominator guard for the empty case."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss: shape mismatch {pred.shape} vs {target.shape}")
    inter = tsum(pred * target)
    denom = tsum(target) + tsum(pred) + EPS_DENOM
    return 1.0 - (2.0 * inter) / denom


def combined_loss(preds, target):
    """Mean of (BCE + Dice) over the supervised maps, each resized to the target.

    `preds` may be a PredictionSet (all four per-stage probability maps are
    supervised) or any sequence of probability maps.
    """
    target = as_tensor(target)
    maps = preds.probs if isinstance(preds, PredictionSet) else tuple(preds)
    if not maps:
        raise ValueError("combined_loss: no prediction maps given")
    th, tw = target.shape[-2:]
    total = None
    for p in maps:
        if p.shape[-2:] != (th, tw):
            p = bilinear_resize(p, th, tw)
        term = bce_loss(p, target) + dice_loss(p, target)
        total = term if total is None else total + term
    return total * (1.0 / len(maps))
