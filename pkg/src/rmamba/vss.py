"""Vision state-space block: pre-norm SS2D and FFN, each with a residual."""
from __future__ import annotations

from .layers import ChannelNorm, Mlp, Module
from .ss2d import SS2D


class VssBlock(Module):
    """Shape-preserving unit repeated in encoder stages and the decoder."""

    def __init__(self, rng, channels, d_state=16, expand=2, ffn_ratio=4):
        self.norm1 = ChannelNorm(channels)
        self.ss2d = SS2D(rng, channels, d_state=d_state, expand=expand)
        self.norm2 = ChannelNorm(channels)
        self.ffn = Mlp(rng, channels, ratio=ffn_ratio)

    def __call__(self, x):
        y = x + self.ss2d(self.norm1(x))
        return y + self.ffn(self.norm2(y))
