"""Hierarchical backbone: stride-4 stem, then four stages with downsampling."""
from __future__ import annotations

from typing import NamedTuple

from .layers import ChannelNorm, Conv2d, Module
from .tensor import Tensor
from .vss import VssBlock


class FeaturePyramid(NamedTuple):
    f1: Tensor  # stride 4
    f2: Tensor  # stride 8
    f3: Tensor  # stride 16
    f4: Tensor  # stride 32


class Stem(Module):
    """Non-overlapping 4x4 patch embedding plus channel norm."""

    def __init__(self, rng, in_ch, out_ch):
        self.proj = Conv2d(rng, in_ch, out_ch, kernel=4, stride=4)
        self.norm = ChannelNorm(out_ch)

    def __call__(self, x):
        h, w = x.shape[-2:]
        for extent, axis in ((h, "height"), (w, "width")):
            if extent % 32 != 0:
                raise ValueError(f"input {axis} {extent} is not divisible by 32")
        return self.norm(self.proj(x))


class Downsample(Module):
    """Stride-2 patch merge doubling the channel count."""

    def __init__(self, rng, in_ch):
        self.proj = Conv2d(rng, in_ch, 2 * in_ch, kernel=2, stride=2)
        self.norm = ChannelNorm(2 * in_ch)

    def __call__(self, x):
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsample needs even extents, got {h}x{w}")
        return self.norm(self.proj(x))


class Encoder(Module):
    def __init__(self, rng, ladder, depths, in_ch=3, d_state=16, expand=2, ffn_ratio=4):
        if len(ladder) != 4 or len(depths) != 4:
            raise ValueError("encoder needs a four-level channel ladder and depths")
        if any(d < 1 for d in depths):
            raise ValueError("stage depths must be >= 1")
        if any(ladder[i + 1] != 2 * ladder[i] for i in range(3)):
            raise ValueError(f"channel ladder must double per level, got {tuple(ladder)}")
        self.ladder = tuple(ladder)
        self.stem = Stem(rng, in_ch, ladder[0])
        self.downsamples = [Downsample(rng, ladder[i]) for i in range(3)]
        self.stages = [
            [VssBlock(rng, ladder[i], d_state=d_state, expand=expand, ffn_ratio=ffn_ratio)
             for _ in range(depths[i])]
            for i in range(4)
        ]

    def __call__(self, image) -> FeaturePyramid:
        x = self.stem(image)
        feats = []
        for i in range(4):
            if i > 0:
                x = self.downsamples[i - 1](x)
            for block in self.stages[i]:
                x = block(x)
            feats.append(x)
        return FeaturePyramid(*feats)
