"""Pseudo-anomaly generation: CutMix-style pastes, CutPaste scars, outlier pools.

All functions take ``(3, H, W)`` float images in [0, 1] and a
``numpy.random.Generator``; the input image is never modified.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .errors import ConfigError

log = logging.getLogger(__name__)

PSEUDO_KINDS = ("cutmix", "cutpaste_scar", "cutpaste_mix", "outlier_pool")


@dataclass(frozen=True)
class RectMask:
    mask: np.ndarray
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    @classmethod
    def from_box(cls, h: int, w: int, top: int, left: int, height: int, width: int) -> "RectMask":
        m = np.zeros((h, w), dtype=bool)
        m[top:top + height, left:left + width] = True
        return cls(m, top, left, height, width)


@dataclass(frozen=True)
class JitterParams:
    brightness: tuple[float, float] = (0.5, 1.5)
    contrast: tuple[float, float] = (0.5, 1.5)
    saturation: tuple[float, float] = (0.5, 1.5)
    hue: tuple[float, float] = (-0.1, 0.1)

    @classmethod
    def identity(cls) -> "JitterParams":
        return cls((1.0, 1.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0))


@dataclass(frozen=True)
class CutMixParams:
    area: tuple[float, float] = (0.01, 0.25)
    jitter: JitterParams = field(default_factory=JitterParams)
    translate: bool = True
    min_inside: float = 0.5
    max_retries: int = 100


@dataclass(frozen=True)
class ScarParams:
    width: tuple[int, int] = (2, 16)
    length: tuple[int, int] = (10, 25)
    rotation: tuple[float, float] = (-45.0, 45.0)
    jitter: JitterParams = field(default_factory=JitterParams)

    def __post_init__(self):
        if self.width[0] < 2 or self.length[0] < 10:
            raise ConfigError("scar must be at least 2x10 pixels")


def random_rect_mask(h: int, w: int, rng: np.random.Generator,
                     area: tuple[float, float] = (0.01, 0.25)) -> RectMask:
    """Uniformly random axis-aligned box whose area fraction lies in ``area``."""
    if h < 8 or w < 8:
        raise ConfigError("images must be at least 8x8 for rectangle masks")
    lo, hi = area
    if not 0 < lo <= hi <= 1:
        raise ConfigError(f"area bounds {area} must satisfy 0 < lo <= hi <= 1")
    total = h * w
    a_min, a_max = int(np.ceil(lo * total - 1e-9)), int(np.floor(hi * total + 1e-9))
    # enumerate all feasible (height, width) pairs once, then sample uniformly
    dims = [(bh, bw) for bh in range(1, h + 1) for bw in range(1, w + 1)
            if a_min <= bh * bw <= a_max]
    if not dims:
        raise ConfigError(f"no box in a {h}x{w} image has area within {area}")
    bh, bw = dims[rng.integers(len(dims))]
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    return RectMask.from_box(h, w, top, left, bh, bw)


def color_jitter(patch: np.ndarray, rng: np.random.Generator, params: JitterParams) -> np.ndarray:
    """Random brightness, contrast, saturation and hue, clamped to [0, 1].

    A factor of exactly 1 (or hue shift 0) leaves the patch bitwise intact.
    """
    out = patch
    b = rng.uniform(*params.brightness)
    c = rng.uniform(*params.contrast)
    s = rng.uniform(*params.saturation)
    hshift = rng.uniform(*params.hue)
    if b != 1.0:
        out = out * b
    if c != 1.0:
        gray = _gray(out).mean()
        out = (out - gray) * c + gray
    if s != 1.0:
        gray = _gray(out)[None]
        out = (out - gray) * s + gray
    if hshift != 0.0:
        hsv = rgb_to_hsv(np.clip(np.moveaxis(out, 0, -1), 0, 1))
        hsv[..., 0] = (hsv[..., 0] + hshift) % 1.0
        out = np.moveaxis(hsv_to_rgb(hsv), -1, 0)
    if out is patch:
        return patch.copy()
    return np.clip(out, 0.0, 1.0).astype(patch.dtype)


def _gray(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def paste_translated(x: np.ndarray, box: RectMask, offset: tuple[int, int], patch: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Paste ``patch`` (the box contents) at the box shifted by ``offset``.

    Parts of the shifted box outside the image are clipped. Returns the new
    image and the translated mask.
    """
    h, w = x.shape[-2:]
    di, dj = offset
    t0, l0 = box.top + di, box.left + dj
    r0, r1 = max(t0, 0), min(t0 + box.height, h)
    c0, c1 = max(l0, 0), min(l0 + box.width, w)
    out = x.copy()
    tmask = np.zeros((h, w), dtype=bool)
    if r0 < r1 and c0 < c1:
        out[:, r0:r1, c0:c1] = patch[:, r0 - t0:r1 - t0, c0 - l0:c1 - l0]
        tmask[r0:r1, c0:c1] = True
    return out, tmask


def _random_offset(box: RectMask, h: int, w: int, rng, min_inside: float, retries: int):
    for _ in range(retries):
        di = int(rng.integers(-box.top - box.height + 1, h - box.top))
        dj = int(rng.integers(-box.left - box.width + 1, w - box.left))
        t0, l0 = box.top + di, box.left + dj
        rows = min(t0 + box.height, h) - max(t0, 0)
        cols = min(l0 + box.width, w) - max(l0, 0)
        if rows > 0 and cols > 0 and rows * cols >= min_inside * box.area:
            return di, dj
    raise ConfigError("could not place the translated patch inside the image")


def cutmix(x_n: np.ndarray, rng: np.random.Generator, params: CutMixParams = CutMixParams(),
           return_mask: bool = False):
    """Cut a random box, color-jitter it, translate it and paste it back.

    Pixels outside the translated box are copied from ``x_n`` unchanged.
    """
    h, w = x_n.shape[-2:]
    box = random_rect_mask(h, w, rng, params.area)
    patch = color_jitter(x_n[:, box.top:box.top + box.height, box.left:box.left + box.width],
                         rng, params.jitter)
    offset = (_random_offset(box, h, w, rng, params.min_inside, params.max_retries)
              if params.translate else (0, 0))
    out, tmask = paste_translated(x_n, box, offset, patch)
    return (out, tmask) if return_mask else out


def cutpaste_scar(x_n: np.ndarray, rng: np.random.Generator, params: ScarParams = ScarParams(),
                  return_mask: bool = False):
    """Thin rotated rectangle cut from one place and pasted at another."""
    h, w = x_n.shape[-2:]
    sw = int(rng.integers(params.width[0], params.width[1] + 1))
    sl = int(rng.integers(params.length[0], params.length[1] + 1))
    sw, sl = min(sw, w), min(sl, h)
    top = int(rng.integers(0, h - sl + 1))
    left = int(rng.integers(0, w - sw + 1))
    patch = color_jitter(x_n[:, top:top + sl, left:left + sw], rng, params.jitter)
    angle = rng.uniform(*params.rotation)
    shape = np.ones((sl, sw), dtype=float)
    rot_mask = ndimage.rotate(shape, angle, reshape=True, order=0, mode="constant", cval=0.0) > 0.5
    rot_patch = np.stack([ndimage.rotate(ch, angle, reshape=True, order=1, mode="nearest") for ch in patch])
    rh, rw = rot_mask.shape
    if rh > h or rw > w:
        rot_mask = rot_mask[:h, :w]
        rot_patch = rot_patch[:, :h, :w]
        rh, rw = rot_mask.shape
    pt = int(rng.integers(0, h - rh + 1))
    pl = int(rng.integers(0, w - rw + 1))
    out = x_n.copy()
    mask = np.zeros((h, w), dtype=bool)
    mask[pt:pt + rh, pl:pl + rw] = rot_mask
    region = out[:, pt:pt + rh, pl:pl + rw]
    region[:, rot_mask] = np.clip(rot_patch[:, rot_mask], 0.0, 1.0).astype(x_n.dtype)
    return (out, mask) if return_mask else out


class OutlierPool:
    """External images used directly as pseudo anomalies.

    ``exclude`` lists identifiers that also occur in the target dataset;
    those are dropped at construction time.
    """

    def __init__(self, images: dict[str, np.ndarray], exclude: Sequence[str] = ()):
        excluded = set(exclude)
        self.ids = sorted(i for i in images if i not in excluded)
        self._images = {i: images[i] for i in self.ids}
        if not self.ids:
            raise ConfigError("outlier pool is empty")

    @classmethod
    def from_directory(cls, root: str | Path, size: int, exclude_file: str | Path | None = None):
        from .protocols import IMAGE_SUFFIXES, load_image

        exclude = []
        if exclude_file is not None:
            exclude = [ln.strip() for ln in Path(exclude_file).read_text().splitlines() if ln.strip()]
        images = {}
        for p in sorted(Path(root).rglob("*")):
            if p.suffix.lower() in IMAGE_SUFFIXES:
                ident = str(p.relative_to(root))
                if ident in exclude or p.stem in exclude:
                    continue
                try:
                    images[ident] = load_image(p, size)
                except OSError as exc:
                    log.warning("skipping unreadable outlier image %s: %s", p, exc)
        return cls(images, exclude)

    def __len__(self) -> int:
        return len(self.ids)

    def draw(self, rng: np.random.Generator, size: int | None = None) -> tuple[str, np.ndarray]:
        ident = self.ids[int(rng.integers(len(self.ids)))]
        img = self._images[ident]
        if size is not None and img.shape[-1] != size:
            img = resize_image(img, size)
        return ident, img.copy()


def outlier_draw(pool: OutlierPool, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    return pool.draw(rng, size)[1]


def resize_image(img: np.ndarray, size: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.as_tensor(img)[None]
    return F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0].numpy()


@dataclass
class PseudoSource:
    """Configured pseudo-anomaly generator."""

    kind: str = "cutmix"
    cutmix_params: CutMixParams = field(default_factory=CutMixParams)
    scar_params: ScarParams = field(default_factory=ScarParams)
    pool: OutlierPool | None = None

    def __post_init__(self):
        if self.kind not in PSEUDO_KINDS:
            raise ConfigError(f"pseudo source must be one of {PSEUDO_KINDS}, got {self.kind!r}")
        if self.kind == "outlier_pool" and (self.pool is None or len(self.pool) == 0):
            raise ConfigError("outlier_pool source needs a nonempty pool")

    def generate(self, x_n: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        kind = self.kind
        if kind == "cutpaste_mix":
            kind = "cutmix" if rng.random() < 0.5 else "cutpaste_scar"
        if kind == "cutmix":
            return cutmix(x_n, rng, self.cutmix_params)
        if kind == "cutpaste_scar":
            return cutpaste_scar(x_n, rng, self.scar_params)
        return outlier_draw(self.pool, rng, x_n.shape[-1])
