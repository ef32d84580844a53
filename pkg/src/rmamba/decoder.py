"""Reverse-attention decoder.

All pyramid levels are reduced to 32 channels; the coarsest level produces an
initial map, and three refinement stages walk back up the pyramid. Each stage
gates the transformed skip feature with (1 - P) of the coarser prediction, so
refinement concentrates on regions the current map misses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .layers import Conv2d, Module
from .tensor import Tensor, bilinear_resize, debug_checks_enabled, relu, sigmoid
from .encoder import FeaturePyramid
from .vss import VssBlock

DECODER_CHANNELS = 32


class AttentionMode(enum.Enum):
    RMA = "RMA"  # state-space block transforms the skip feature
    RA = "RA"    # conv+relu baseline transform


@dataclass
class PredictionSet:
    """Per-stage pre-sigmoid maps and probabilities, coarse (index 0) to fine."""
    logits: tuple          # (l4, l3, l2, l1), strides 32/16/8/4
    probs: tuple           # sigmoid of each
    final: Tensor          # probs at stride 4 upsampled to input resolution


def reverse_op(p):
    """Complement against the all-ones map; involutive on [0, 1]."""
    if debug_checks_enabled():
        d = p.data
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError(f"reverse_op input outside [0, 1]: min={d.min()}, max={d.max()}")
    return 1.0 - p


class ConvDelta(Module):
    """Conv-based skip transform used by the RA baseline."""

    def __init__(self, rng, channels):
        self.conv = Conv2d(rng, channels, channels, kernel=3, padding=1)

    def __call__(self, x):
        return relu(self.conv(x))


class RMAStage(Module):
    def __init__(self, rng, mode: AttentionMode, d_state=16, expand=2, ffn_ratio=4):
        ch = DECODER_CHANNELS
        if mode is AttentionMode.RMA:
            self.delta = VssBlock(rng, ch, d_state=d_state, expand=expand, ffn_ratio=ffn_ratio)
        else:
            self.delta = ConvDelta(rng, ch)
        self.refine1 = Conv2d(rng, ch, ch, kernel=3, padding=1)
        self.refine2 = Conv2d(rng, ch, 1, kernel=3, padding=1)

    def __call__(self, logits_next, feat):
        hc, wc = logits_next.shape[-2:]
        h, w = feat.shape[-2:]
        if (h, w) != (2 * hc, 2 * wc):
            raise ValueError(f"stage expects adjacent pyramid levels: feature {h}x{w} "
                             f"vs coarser map {hc}x{wc}")
        p = bilinear_resize(logits_next, h, w)
        prob = sigmoid(p)
        gated = reverse_op(prob) * self.delta(feat)   # 1-channel gate over all channels
        m = gated + feat
        p2 = self.refine2(relu(self.refine1(m)))
        logits = p + p2
        return logits, sigmoid(logits)


class RMADecoder(Module):
    def __init__(self, rng, ladder, mode: AttentionMode = AttentionMode.RMA,
                 d_state=16, expand=2, ffn_ratio=4):
        self.mode = mode
        self.reduce = [Conv2d(rng, c, DECODER_CHANNELS, kernel=3, padding=1) for c in ladder]
        self.head = Conv2d(rng, DECODER_CHANNELS, 1, kernel=1)
        self.stages = [RMAStage(rng, mode, d_state=d_state, expand=expand, ffn_ratio=ffn_ratio)
                       for _ in range(3)]

    def reduce_channels(self, pyr: FeaturePyramid):
        return tuple(conv(f) for conv, f in zip(self.reduce, pyr))

    def initial_prediction(self, r4):
        logits4 = self.head(r4)
        return logits4, sigmoid(logits4)

    def __call__(self, pyr: FeaturePyramid) -> PredictionSet:
        r1, r2, r3, r4 = self.reduce_channels(pyr)
        logits, probs = self.initial_prediction(r4)
        all_logits, all_probs = [logits], [probs]
        for stage, feat in zip(self.stages, (r3, r2, r1)):
            logits, probs = stage(logits, feat)
            all_logits.append(logits)
            all_probs.append(probs)
        h, w = pyr.f1.shape[-2:]
        final = bilinear_resize(all_probs[-1], 4 * h, 4 * w)
        return PredictionSet(logits=tuple(all_logits), probs=tuple(all_probs), final=final)
