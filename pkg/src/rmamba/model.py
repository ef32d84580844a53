"""Full segmentation network: encoder, optional extra VSS blocks, decoder."""
from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .decoder import AttentionMode, PredictionSet, RMADecoder
from .encoder import Encoder
from .layers import Module, count_parameters  # noqa: F401 (re-export)
from .vss import VssBlock


class RMAMamba(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        cfg = config.resolved()
        self.config = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(rng, cfg.channel_ladder, cfg.stage_depths,
                               d_state=cfg.d_state, expand=cfg.expand, ffn_ratio=cfg.ffn_ratio)
        # extra refinement blocks applied to every pyramid level before decoding
        self.extra = [
            [VssBlock(rng, ch, d_state=cfg.d_state, expand=cfg.expand, ffn_ratio=cfg.ffn_ratio)
             for _ in range(cfg.n_extra_vss)]
            for ch in cfg.channel_ladder
        ]
        self.decoder = RMADecoder(rng, cfg.channel_ladder, mode=AttentionMode(cfg.attention),
                                  d_state=cfg.d_state, expand=cfg.expand, ffn_ratio=cfg.ffn_ratio)

    def __call__(self, image) -> PredictionSet:
        pyr = self.encoder(image)
        feats = []
        for blocks, feat in zip(self.extra, pyr):
            for block in blocks:
                feat = block(feat)
            feats.append(feat)
        return self.decoder(type(pyr)(*feats))


def build_model(config: ModelConfig, seed: int = 0) -> RMAMamba:
    return RMAMamba(config, seed=seed)
