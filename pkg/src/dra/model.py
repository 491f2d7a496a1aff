"""The assembled detector: shared backbone, enabled heads, reference set."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .featurenet import PYRAMID_SCALES, BackboneConfig, FeatureNet, build_backbone, pyramid_views
from .heads import (AblationMask, HeadScores, NormalityHead, PatchClassifier, ReferenceSet,
                    composite_score, mil_score, normality_score, residual_score)


class DRAModel(nn.Module):
    """Backbone plus one independent parameter set per enabled head.

    Disabled heads are never constructed, so they own no parameters.
    """

    def __init__(self, backbone_config: BackboneConfig, mask: AblationMask | None = None,
                 k_fraction: float = 0.1, scales: Sequence[float] = PYRAMID_SCALES, seed: int = 0):
        super().__init__()
        self.mask = mask or AblationMask()
        self.k_fraction = k_fraction
        self.scales = tuple(scales)
        self.backbone: FeatureNet = build_backbone(backbone_config, seed)
        c = backbone_config.channels
        heads = {}
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            for name in self.mask.enabled:
                heads[name] = NormalityHead(c) if name == "normal" else PatchClassifier(c)
        self.heads = nn.ModuleDict(heads)
        self.refset: ReferenceSet | None = None

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def set_reference(self, images, roles=None) -> ReferenceSet:
        if self.refset is not None:
            raise RuntimeError("reference set is write-once")
        self.refset = ReferenceSet.build(images, self.backbone, self.scales, roles)
        return self.refset

    def head_outputs(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        """Scores of every enabled head for a batch at a single scale."""
        fmap = self.backbone(x)
        out = {}
        for name, head in self.heads.items():
            if name == "normal":
                out[name] = normality_score(fmap, head)
            elif name == "residual":
                out[name] = residual_score(fmap, self.refset, head, self.k_fraction)
            else:
                out[name] = mil_score(fmap, head, self.k_fraction)
        return out

    def forward(self, x: torch.Tensor) -> list[dict[str, torch.Tensor]]:
        """Per-scale head outputs for a ``(B, 3, H, W)`` batch."""
        return [self.head_outputs(v) for v in pyramid_views(x, self.scales, self.config)]

    @torch.no_grad()
    def score(self, images, batch_size: int = 64) -> tuple[np.ndarray, list[HeadScores]]:
        """Composite anomaly scores and per-head breakdowns, in eval mode."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        images = torch.as_tensor(np.asarray(images)).to(dtype)
        composite, breakdown = [], []
        try:
            for start in range(0, len(images), batch_size):
                per_scale = self(images[start:start + batch_size])
                for i in range(len(per_scale[0][self.mask.enabled[0]])):
                    scales = [{h: float(s[h][i]) for h in s} for s in per_scale]
                    breakdown.append(HeadScores(scales))
                    composite.append(composite_score(scales, self.mask))
        finally:
            self.train(was_training)
        return np.asarray(composite, dtype=np.float64), breakdown
