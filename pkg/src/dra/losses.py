"""Per-head losses and label routing for the joint objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch

from .errors import ConfigError, ConsistencyError, NumericError
from .heads import HEADS, AblationMask

NORMAL, SEEN, PSEUDO = "normal", "seen_anomaly", "pseudo_anomaly"
ROLES = (NORMAL, SEEN, PSEUDO)
LOSS_KINDS = ("deviation", "bce", "focal")

# role -> {head: target}; a head absent from the inner map never sees the role.
# The normality head scores normality, so its target is 1 for normal images.
ROUTING = {
    NORMAL: {"seen": 0.0, "pseudo": 0.0, "residual": 0.0, "normal": 1.0},
    SEEN: {"seen": 1.0, "residual": 1.0, "normal": 0.0},
    PSEUDO: {"pseudo": 1.0, "residual": 1.0, "normal": 0.0},
}

EPS = 1e-7


@dataclass(frozen=True)
class PriorScoreSet:
    samples: np.ndarray
    mu: float
    sigma: float

    @classmethod
    def from_samples(cls, samples) -> "PriorScoreSet":
        samples = np.asarray(samples, dtype=np.float64)
        sigma = float(samples.std())
        if not sigma > 0:
            raise ConfigError("prior score set has zero spread")
        return cls(samples, float(samples.mean()), sigma)

    @classmethod
    def draw(cls, rng: np.random.Generator, n: int = 5000, mean: float = 0.0, std: float = 1.0):
        return cls.from_samples(rng.normal(mean, std, size=n))


def deviation(score, prior: PriorScoreSet):
    if not prior.sigma > 0:
        raise ConfigError("prior score set has zero spread")
    return (score - prior.mu) / prior.sigma


def _check_finite(score):
    ok = torch.isfinite(score).all() if torch.is_tensor(score) else np.all(np.isfinite(score))
    if not ok:
        raise NumericError("non-finite anomaly score")


def deviation_loss(score, y, prior: PriorScoreSet, a: float = 5.0):
    """``(1-y)|dev| + y max(0, a - dev)``, element-wise."""
    if not a > 0:
        raise ConfigError("margin a must be positive")
    _check_finite(score)
    dev = deviation(score, prior)
    if torch.is_tensor(dev):
        return (1 - y) * dev.abs() + y * torch.clamp(a - dev, min=0)
    return (1 - y) * np.abs(dev) + y * np.maximum(0.0, a - dev)


def _prob(score):
    if torch.is_tensor(score):
        return torch.sigmoid(score).clamp(EPS, 1 - EPS)
    return np.clip(1.0 / (1.0 + np.exp(-np.asarray(score, dtype=np.float64))), EPS, 1 - EPS)


def _log(p):
    return torch.log(p) if torch.is_tensor(p) else np.log(p)


def bce_loss(score, y):
    _check_finite(score)
    p = _prob(score)
    return -(y * _log(p) + (1 - y) * _log(1 - p))


def focal_loss(score, y, gamma: float = 2.0, alpha: float = 0.25):
    if gamma < 0:
        raise ConfigError("focal gamma must be non-negative")
    _check_finite(score)
    p = _prob(score)
    pos = -alpha * (1 - p) ** gamma * _log(p)
    neg = -(1 - alpha) * p ** gamma * _log(1 - p)
    return y * pos + (1 - y) * neg


@dataclass(frozen=True)
class LossConfig:
    kind: str = "deviation"
    margin: float = 5.0
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")


def head_loss(score, y, cfg: LossConfig, prior: PriorScoreSet | None):
    if cfg.kind == "deviation":
        if prior is None:
            raise ConfigError("deviation loss needs a prior score set")
        return deviation_loss(score, y, prior, cfg.margin)
    if cfg.kind == "bce":
        return bce_loss(score, y)
    return focal_loss(score, y, cfg.gamma, cfg.alpha)


def routing_targets(roles) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """For each head, the indices of routed samples and their binary targets."""
    roles = list(roles)
    out = {}
    for head in HEADS:
        idx = [i for i, r in enumerate(roles) if head in ROUTING[r]]
        out[head] = (np.asarray(idx, dtype=np.int64),
                     np.asarray([ROUTING[roles[i]][head] for i in idx], dtype=np.float64))
    return out


def route_and_total(scores: Mapping[str, torch.Tensor], roles, mask: AblationMask,
                    cfg: LossConfig = LossConfig(), prior: PriorScoreSet | None = None
                    ) -> tuple[torch.Tensor, dict[str, float]]:
    """Joint objective: per-head mean loss over routed samples, summed over heads.

    ``scores[head]`` holds one score per batch sample; only the samples the
    role routes to ``head`` enter its loss. Returns the total and the
    per-head mean losses (heads with no routed samples are omitted).
    """
    extra = set(scores) - set(mask.enabled)
    if extra:
        raise ConsistencyError(f"scores supplied for disabled heads {sorted(extra)}")
    roles = list(roles)
    for r in set(roles):
        if r not in ROUTING:
            raise ConfigError(f"unknown role {r!r}")
        if not set(ROUTING[r]) & set(scores):
            raise ConsistencyError(f"{r} samples are routed only to disabled heads")
    total = None
    per_head = {}
    for head, (idx, y) in routing_targets(roles).items():
        if head not in scores or len(idx) == 0:
            continue
        s = scores[head]
        s = s[torch.as_tensor(idx)] if torch.is_tensor(s) else np.asarray(s)[idx]
        yt = torch.as_tensor(y, dtype=s.dtype) if torch.is_tensor(s) else y
        loss = head_loss(s, yt, cfg, prior).mean()
        per_head[head] = float(loss.detach()) if torch.is_tensor(loss) else float(loss)
        total = loss if total is None else total + loss
    if total is None:
        total = torch.zeros(())
    return total, per_head
