"""Abnormality and normality scoring heads.

Three abnormality heads (``seen``, ``pseudo``, ``residual``) score an image
by top-K multiple-instance pooling over a 1x1 patch classifier. The
``residual`` head applies the same machinery to the difference between a
fixed reference feature map and the image's own feature map. The ``normal``
head pools the feature map globally and scores it with a two-layer MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ConsistencyError, DataError, InputShapeError, StateError

HEADS = ("seen", "pseudo", "residual", "normal")
ABNORMAL_HEADS = ("seen", "pseudo", "residual")


@dataclass(frozen=True)
class AblationMask:
    seen: bool = True
    pseudo: bool = True
    residual: bool = True
    normal: bool = True

    def __post_init__(self):
        if not (self.seen or self.pseudo or self.residual):
            raise ConfigError("at least one abnormality head must be enabled")

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(h for h in HEADS if getattr(self, h))

    def __contains__(self, head: str) -> bool:
        return head in HEADS and getattr(self, head)

    @classmethod
    def preset(cls, name: str) -> "AblationMask":
        try:
            heads = PRESETS[name]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}") from None
        return cls(**{h: h in heads for h in HEADS})

    @property
    def name(self) -> str | None:
        for key, heads in PRESETS.items():
            if set(heads) == set(self.enabled):
                return key
        return None


PRESETS = {
    "DRA1A": ("seen",),
    "DRA2A": ("seen", "pseudo"),
    "DRA3Ar": ("seen", "pseudo", "residual"),
    "DRA3An": ("seen", "pseudo", "normal"),
    "DRA": ("seen", "pseudo", "residual", "normal"),
}


class PatchClassifier(nn.Module):
    """1x1 convolution giving one anomaly score per spatial location."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, 1, kernel_size=1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return patch_scores(fmap, self)


class NormalityHead(nn.Module):
    """Global average pool followed by ``c' -> c'/2 -> 1`` with a ReLU."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = max(1, channels // 2)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        return normality_score(fmap, self)


def patch_scores(fmap: torch.Tensor, classifier: PatchClassifier) -> torch.Tensor:
    """Score map of shape ``(h', w')`` (or ``(B, h', w')`` for a batch)."""
    single = fmap.dim() == 3
    x = fmap.unsqueeze(0) if single else fmap
    if x.dim() != 4 or x.shape[1] != classifier.conv.in_channels:
        raise InputShapeError(
            f"feature map {tuple(fmap.shape)} does not match a {classifier.conv.in_channels}-channel classifier")
    out = classifier.conv(x)[:, 0]
    return out[0] if single else out


def topk_count(n: int, k_fraction: float) -> int:
    return max(1, int(math.floor(k_fraction * n)))


def topk_mil_pool(scores: torch.Tensor, k_fraction: float = 0.1) -> torch.Tensor:
    """Mean of the K largest entries of a score map, K = max(1, floor(k*n)).

    Accepts ``(h, w)`` or a batch ``(B, h, w)``. Equal scores at the
    selection boundary are taken in increasing flat index order, so the
    gradient goes to the earliest positions.
    """
    if not 0.0 < k_fraction <= 1.0:
        raise ConfigError(f"k_fraction must lie in (0, 1], got {k_fraction}")
    scores = torch.as_tensor(scores)
    single = scores.dim() <= 2
    flat = scores.reshape(1, -1) if single else scores.reshape(scores.shape[0], -1)
    n = flat.shape[1]
    if n == 0:
        raise DataError("empty score map")
    k = topk_count(n, k_fraction)
    top = torch.sort(flat, dim=1, descending=True, stable=True).values[:, :k]
    pooled = top.mean(dim=1)
    return pooled[0] if single else pooled


def normality_score(fmap: torch.Tensor, head: NormalityHead) -> torch.Tensor:
    single = fmap.dim() == 3
    x = fmap.unsqueeze(0) if single else fmap
    if x.dim() != 4 or x.shape[1] != head.fc1.in_features:
        raise InputShapeError(
            f"feature map {tuple(fmap.shape)} does not match a {head.fc1.in_features}-wide normality head")
    pooled = global_pool(x)
    out = head.fc2(torch.relu(head.fc1(pooled)))[:, 0]
    return out[0] if single else out


def global_pool(fmap: torch.Tensor) -> torch.Tensor:
    """Mean patch vector: ``(B, c', h', w') -> (B, c')``."""
    return fmap.mean(dim=(-2, -1))


def residual_map(m_r: torch.Tensor, m_x: torch.Tensor) -> torch.Tensor:
    """Element-wise ``m_r - m_x``; ``m_r`` broadcasts over a batch of ``m_x``."""
    if tuple(m_r.shape) != tuple(m_x.shape[-m_r.dim():]) or m_x.dim() - m_r.dim() not in (0, 1):
        raise InputShapeError(f"residual of {tuple(m_r.shape)} and {tuple(m_x.shape)}")
    return m_r - m_x


def mean_feature_map(maps: torch.Tensor) -> torch.Tensor:
    """Element-wise mean over the leading axis, independent of its order.

    Values are sorted along the leading axis before summation in float64,
    so any permutation of the inputs gives a bitwise-identical result.
    """
    if maps.shape[0] == 0:
        raise DataError("no reference maps")
    ordered = torch.sort(maps.to(torch.float64), dim=0).values
    return ordered.sum(dim=0) / maps.shape[0]


@torch.no_grad()
def compute_reference_map(refs, backbone) -> torch.Tensor:
    """Mean backbone feature map over reference images (no gradient).

    ``refs`` is a sequence of ``(3, H, W)`` images or a stacked batch.
    Returns float64.
    """
    if len(refs) == 0:
        raise DataError("reference set is empty")
    shapes = {tuple(np.shape(r)) for r in refs}
    if len(shapes) != 1:
        raise InputShapeError(f"reference images have mixed shapes {sorted(shapes)}")
    dtype = next(backbone.parameters()).dtype
    batch = torch.stack([torch.as_tensor(np.asarray(r)) if not torch.is_tensor(r) else r for r in refs]).to(dtype)
    was_training = backbone.training
    backbone.eval()
    try:
        maps = backbone(batch)
    finally:
        backbone.train(was_training)
    return mean_feature_map(maps)


class ReferenceSet:
    """Reference images and their cached mean feature map, per pyramid scale.

    Written once by :meth:`build` (or restored from a checkpoint) and
    immutable afterwards.
    """

    def __init__(self, images: np.ndarray, maps: Mapping[tuple[int, int], torch.Tensor],
                 roles: Sequence[str] | None = None):
        if len(images) < 1:
            raise DataError("reference set needs at least one image")
        self.images = np.array(images, copy=True)
        self.images.setflags(write=False)
        self.roles = tuple(roles) if roles is not None else ("normal",) * len(images)
        self._maps = {tuple(k): v.detach().clone() for k, v in maps.items()}

    @classmethod
    def build(cls, images, backbone, scales: Sequence[float], roles=None) -> "ReferenceSet":
        from .featurenet import pyramid_views

        images = np.stack([np.asarray(im) for im in images])
        maps = {}
        for view in pyramid_views(torch.as_tensor(images), scales, backbone.config):
            m = compute_reference_map(view, backbone)
            maps[tuple(m.shape[-2:])] = m
        return cls(images, maps, roles)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def maps(self) -> dict[tuple[int, int], torch.Tensor]:
        return {k: v.clone() for k, v in self._maps.items()}

    def reference_map(self, spatial: tuple[int, int], dtype=None) -> torch.Tensor:
        try:
            m = self._maps[tuple(spatial)]
        except KeyError:
            raise StateError(f"no reference map for feature size {tuple(spatial)}; "
                             f"have {sorted(self._maps)}") from None
        return m if dtype is None else m.to(dtype)


def residual_score(m_x: torch.Tensor, refset: ReferenceSet | None, classifier: PatchClassifier,
                   k_fraction: float = 0.1) -> torch.Tensor:
    if refset is None:
        raise StateError("residual head used before the reference set was initialized")
    m_r = refset.reference_map(tuple(m_x.shape[-2:]), dtype=m_x.dtype)
    return topk_mil_pool(patch_scores(residual_map(m_r, m_x), classifier), k_fraction)


def mil_score(fmap: torch.Tensor, classifier: PatchClassifier, k_fraction: float = 0.1) -> torch.Tensor:
    """Top-K MIL image score; used by both the seen and pseudo heads."""
    return topk_mil_pool(patch_scores(fmap, classifier), k_fraction)


seen_score = mil_score
pseudo_score = mil_score


@dataclass
class HeadScores:
    """Per-head scores of one image, one mapping per pyramid scale."""

    per_scale: list[dict[str, float]] = field(default_factory=list)

    @property
    def heads(self) -> tuple[str, ...]:
        return tuple(h for h in HEADS if self.per_scale and h in self.per_scale[0])

    def __getitem__(self, head: str) -> float:
        return float(np.mean([s[head] for s in self.per_scale]))

    def __contains__(self, head: str) -> bool:
        return head in self.heads


def composite_score(per_scale: Iterable[Mapping[str, float]], mask: AblationMask) -> float:
    """Sum of enabled abnormality scores minus the normality score, averaged over scales."""
    per_scale = list(per_scale)
    if not per_scale:
        raise DataError("no per-scale scores to aggregate")
    totals = []
    for scores in per_scale:
        present = set(scores)
        extra = present - set(mask.enabled)
        if extra:
            raise ConsistencyError(f"scores given for disabled heads {sorted(extra)}")
        missing = set(mask.enabled) - present
        if missing:
            raise ConsistencyError(f"scores missing for enabled heads {sorted(missing)}")
        total = sum(float(scores[h]) for h in ABNORMAL_HEADS if h in present)
        if "normal" in present:
            total -= float(scores["normal"])
        totals.append(total)
    return float(np.mean(totals))
