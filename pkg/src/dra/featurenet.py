"""Feature extraction backbones and image pyramids.

Two backbones are supported:

* ``resnet18``: the residual-18 trunk (everything up to the last residual
  stage), 512 output channels, downsample factor 32.
* ``tiny``: three conv3x3/ReLU/maxpool blocks with 64 channels, downsample
  factor 8. Intended for desk-scale experiments and tests.

Images are ``(3, H, W)`` arrays (or ``(B, 3, H, W)`` batches) in [0, 1].
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .container import load_container, save_container
from .errors import ConfigError, InputShapeError, NumericError

# ImageNet statistics, applied only in front of pretrained residual weights.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

PYRAMID_SCALES = (1.0, 0.5)

_ARCH_DEFAULTS = {
    "resnet18": {"channels": 512, "downsample": 32},
    "tiny": {"channels": 64, "downsample": 8},
}


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "resnet18"
    weights_path: str | None = None
    channels: int | None = None
    downsample: int | None = None
    freeze: bool = False
    normalize: bool | None = None

    def __post_init__(self):
        if self.normalize is None:
            # channel standardization only makes sense for pretrained residual weights
            object.__setattr__(self, "normalize", self.arch == "resnet18" and self.weights_path is not None)
        if self.arch not in _ARCH_DEFAULTS:
            raise ConfigError(f"unknown backbone {self.arch!r}; choose from {sorted(_ARCH_DEFAULTS)}")
        defaults = _ARCH_DEFAULTS[self.arch]
        if self.channels is None:
            object.__setattr__(self, "channels", defaults["channels"])
        if self.downsample is None:
            object.__setattr__(self, "downsample", defaults["downsample"])
        if self.channels <= 0:
            raise ConfigError("channels must be positive")
        if self.arch == "resnet18" and (self.channels, self.downsample) != (512, 32):
            raise ConfigError("resnet18 geometry is fixed at 512 channels / downsample 32")
        if self.arch == "tiny" and self.downsample not in (2, 4, 8):
            raise ConfigError("tiny backbone supports downsample 2, 4 or 8")

    @property
    def min_size(self) -> int:
        return self.downsample

    def feature_shape(self, height: int, width: int) -> tuple[int, int, int]:
        check_input_size(height, width, self)
        return (self.channels, height // self.downsample, width // self.downsample)

    def to_dict(self) -> dict:
        return asdict(self)


def check_input_size(height: int, width: int, config: BackboneConfig) -> None:
    d = config.downsample
    if height < d or width < d or height % d or width % d:
        raise InputShapeError(
            f"input {height}x{width} is not a positive multiple of the downsample factor {d}")


class TinyBackbone(nn.Module):
    def __init__(self, channels: int = 64, downsample: int = 8):
        super().__init__()
        n_pool = int(np.log2(downsample))
        layers: list[nn.Module] = []
        c_in = 3
        for i in range(3):
            layers.append(nn.Conv2d(c_in, channels, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            if i < n_pool:
                layers.append(nn.MaxPool2d(2))
            c_in = channels
        self.body = nn.Sequential(*layers)
        for m in self.body:
            if isinstance(m, nn.Conv2d):
                # He-uniform keeps activations from shrinking through the ReLU stack
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def forward(self, x):
        return self.body(x)


class ResNet18Backbone(nn.Module):
    def __init__(self, normalize: bool = False):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        self.trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                   net.layer1, net.layer2, net.layer3, net.layer4)
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.trunk(x)


class FeatureNet(nn.Module):
    """Wraps a backbone with input validation and finiteness checks."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        if config.arch == "tiny":
            self.net = TinyBackbone(config.channels, config.downsample)
        else:
            self.net = ResNet18Backbone(normalize=config.normalize)
        if config.weights_path is not None:
            load_backbone_weights(self, config.weights_path)
        if config.freeze:
            for p in self.parameters():
                p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 3:
            raise InputShapeError(f"expected a (B, 3, H, W) batch, got {tuple(x.shape)}")
        check_input_size(x.shape[-2], x.shape[-1], self.config)
        out = self.net(x)
        if not torch.isfinite(out).all():
            raise NumericError("backbone produced non-finite activations")
        return out


def build_backbone(config: BackboneConfig, seed: int | None = 0) -> FeatureNet:
    """Construct a backbone; initialization is reproducible for a given seed.

    Without pretrained weights, layers use fan-in scaled uniform
    initialization (He-uniform for the tiny backbone's convolutions,
    torch defaults elsewhere).
    """
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        return FeatureNet(config)


def as_batch(image, dtype=None) -> torch.Tensor:
    t = torch.as_tensor(image)
    if dtype is not None:
        t = t.to(dtype)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def extract_features(image, backbone: FeatureNet) -> torch.Tensor:
    """Feature map(s) for one ``(3, H, W)`` image or a batch.

    Returns ``(c', h', w')`` for a single image and ``(B, c', h', w')`` for a
    batch. Gradients flow to the backbone parameters.
    """
    single = torch.as_tensor(image).dim() == 3
    dtype = next(backbone.parameters()).dtype
    out = backbone(as_batch(image, dtype))
    return out[0] if single else out


def pyramid_views(image, scales: Sequence[float] = PYRAMID_SCALES,
                  config: BackboneConfig | None = None) -> list[torch.Tensor]:
    """Bilinearly resized copies of ``image``, one per scale.

    Works on a single image or a batch; the input is never modified. Scale
    1.0 returns an exact copy.
    """
    if not scales:
        raise ConfigError("at least one pyramid scale is required")
    x = torch.as_tensor(image)
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    h, w = xb.shape[-2:]
    views = []
    for s in scales:
        if not 0.0 < s <= 1.0:
            raise ConfigError(f"pyramid scale {s} outside (0, 1]")
        size = (int(round(h * s)), int(round(w * s)))
        if config is not None and min(size) < config.min_size:
            raise ConfigError(f"scale {s} gives {size}, below the backbone minimum {config.min_size}")
        if size == (h, w):
            v = xb.clone()
        else:
            v = F.interpolate(xb, size=size, mode="bilinear", align_corners=False)
        views.append(v[0] if single else v)
    return views


def save_backbone_weights(backbone: FeatureNet, path: str | Path) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in backbone.net.state_dict().items()}
    save_container(path, arrays, backbone.config.to_dict(), kind="backbone")


def load_backbone_weights(backbone: FeatureNet, path: str | Path) -> None:
    arrays, _ = load_container(path, kind="backbone")
    state = backbone.net.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise ConfigError(f"{path}: weights missing for {missing[:5]}")
    backbone.net.load_state_dict({k: torch.from_numpy(np.array(arrays[k])) for k in state})


def export_torchvision_resnet18(state_dict, path: str | Path) -> None:
    """Write a torchvision ``resnet18`` state dict as a backbone container.

    The classifier (``fc.*``) is dropped; the remaining keys are renamed to
    the trunk layout used here.
    """
    order = ["conv1", "bn1", "relu", "maxpool", "layer1", "layer2", "layer3", "layer4"]
    arrays = {}
    for key, value in state_dict.items():
        head, _, rest = key.partition(".")
        if head not in order:
            continue
        arrays[f"trunk.{order.index(head)}.{rest}"] = np.asarray(value.detach().cpu().numpy()
                                                                 if hasattr(value, "detach") else value)
    save_container(path, arrays, BackboneConfig("resnet18").to_dict(), kind="backbone")
