"""Dataset catalogs and open-set experiment protocols.

Identifiers are POSIX paths relative to the dataset root without the file
suffix, e.g. ``test/crack/003``. Directory layout::

    root/train/good/*       normal training images
    root/test/good/*        normal test images
    root/test/<class>/*     anomalies, one subdirectory per class

Synthetic datasets (:func:`synth_generate`) use the same identifiers and can
be written to disk in this layout with :func:`write_dataset`.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
NORMAL_SPLIT_RATIO = 0.75


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    """Read an image as a ``(3, H, W)`` float32 array in [0, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _as_rng(rng) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), int(rng)


@dataclass(frozen=True, eq=False)
class DatasetCatalog:
    name: str
    normal_train: tuple[str, ...]
    normal_test: tuple[str, ...]
    anomalies: Mapping[str, tuple[str, ...]]
    presplit: bool = True
    image_size: int | None = None
    paths: Mapping[str, str] = field(default_factory=dict)
    images: Mapping[str, np.ndarray] = field(default_factory=dict, repr=False)
    recipes: Mapping[str, dict] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        groups = [set(self.normal_train), set(self.normal_test), *map(set, self.anomalies.values())]
        seen: set[str] = set()
        for g in groups:
            if seen & g:
                raise DataError(f"identifiers appear in more than one group: {sorted(seen & g)[:5]}")
            seen |= g

    @property
    def classes(self) -> tuple[str, ...]:
        return tuple(sorted(self.anomalies))

    @property
    def all_anomalies(self) -> tuple[str, ...]:
        return tuple(i for c in self.classes for i in self.anomalies[c])

    def class_of(self, ident: str) -> str | None:
        for c, ids in self.anomalies.items():
            if ident in ids:
                return c
        return None

    def load(self, ident: str) -> np.ndarray:
        if ident in self.images:
            return self.images[ident]
        try:
            return load_image(self.paths[ident], self.image_size)
        except KeyError:
            raise DataError(f"unknown sample {ident!r}") from None

    def load_many(self, ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.load(i) for i in ids])

    def counts(self) -> dict[str, int]:
        out = {"train/good": len(self.normal_train), "test/good": len(self.normal_test)}
        out.update({f"test/{c}": len(self.anomalies[c]) for c in self.classes})
        return out

    def manifest_rows(self) -> list[dict[str, str]]:
        rows = [{"id": i, "path": self.paths.get(i, ""), "role": "train_normal", "class": ""}
                for i in self.normal_train]
        rows += [{"id": i, "path": self.paths.get(i, ""), "role": "test_normal", "class": ""}
                 for i in self.normal_test]
        rows += [{"id": i, "path": self.paths.get(i, ""), "role": "anomaly", "class": c}
                 for c in self.classes for i in self.anomalies[c]]
        return rows


def write_manifest(catalog: DatasetCatalog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "path", "role", "class"], lineterminator="\n")
        w.writeheader()
        w.writerows(catalog.manifest_rows())


def read_manifest(path: str | Path, name: str | None = None, image_size: int | None = None,
                  presplit: bool = True) -> DatasetCatalog:
    train, test, anomalies, paths = [], [], {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ident = row["id"]
            if row["path"]:
                p = Path(row["path"])
                paths[ident] = str(p if p.is_absolute() else Path(path).parent / p)
            if row["role"] == "train_normal":
                train.append(ident)
            elif row["role"] == "test_normal":
                test.append(ident)
            elif row["role"] == "anomaly":
                anomalies.setdefault(row["class"], []).append(ident)
            else:
                raise DataError(f"{path}: unknown role {row['role']!r}")
    return DatasetCatalog(name or Path(path).parent.name, tuple(train), tuple(test),
                          {c: tuple(v) for c, v in anomalies.items()}, presplit, image_size, paths)


def _readable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except Exception as exc:  # PIL raises a wide range of types here
        warnings.warn(f"skipping unreadable image {path}: {exc}")
        return False


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_directory(root: str | Path, image_size: int | None = None, name: str | None = None
                     ) -> DatasetCatalog:
    root = Path(root)
    if not (root / "train" / "good").is_dir():
        raise DataError(f"{root}: expected a train/good directory")
    paths: dict[str, str] = {}

    def collect(directory: Path) -> tuple[str, ...]:
        ids = []
        for p in _image_files(directory):
            if _readable(p):
                ident = p.relative_to(root).with_suffix("").as_posix()
                paths[ident] = str(p)
                ids.append(ident)
        return tuple(ids)

    train = collect(root / "train" / "good")
    test_dir = root / "test"
    test = collect(test_dir / "good") if (test_dir / "good").is_dir() else ()
    anomalies = {}
    if test_dir.is_dir():
        for d in sorted(p for p in test_dir.iterdir() if p.is_dir() and p.name != "good"):
            ids = collect(d)
            if ids:
                anomalies[d.name] = ids
            else:
                warnings.warn(f"anomaly class directory {d} is empty; class omitted")
    return DatasetCatalog(name or root.name, train, test, anomalies, presplit=bool(test),
                          image_size=image_size, paths=paths)


@dataclass(frozen=True, eq=False)
class SplitResult:
    train_normals: tuple[str, ...]
    train_anomalies: tuple[str, ...]
    test_normals: tuple[str, ...]
    test_anomalies: tuple[str, ...]
    anomaly_class: Mapping[str, str]
    setting: str
    shots: int
    seed: int | None = None
    seen_class: str | None = None
    catalog: DatasetCatalog | None = field(default=None, repr=False)

    def __post_init__(self):
        if set(self.train_anomalies) & set(self.test_anomalies):
            raise DataError("train and test anomalies overlap")
        if set(self.train_normals) & set(self.test_normals):
            raise DataError("train and test normals overlap")
        if len(self.train_anomalies) != self.shots:
            raise DataError(f"expected {self.shots} training anomalies, got {len(self.train_anomalies)}")
        if self.setting == "hard" and any(self.anomaly_class[i] == self.seen_class
                                          for i in self.test_anomalies):
            raise DataError("hard split leaks the seen class into the test set")

    @property
    def test_ids(self) -> tuple[str, ...]:
        return self.test_normals + self.test_anomalies

    @property
    def test_labels(self) -> np.ndarray:
        return np.r_[np.zeros(len(self.test_normals), int), np.ones(len(self.test_anomalies), int)]

    def to_dict(self) -> dict:
        return {
            "setting": self.setting, "shots": self.shots, "seed": self.seed,
            "seen_class": self.seen_class,
            "train_normals": list(self.train_normals), "train_anomalies": list(self.train_anomalies),
            "test_normals": list(self.test_normals), "test_anomalies": list(self.test_anomalies),
            "anomaly_class": dict(sorted(self.anomaly_class.items())),
        }

    @classmethod
    def from_dict(cls, d: dict, catalog: DatasetCatalog | None = None) -> "SplitResult":
        return cls(tuple(d["train_normals"]), tuple(d["train_anomalies"]), tuple(d["test_normals"]),
                   tuple(d["test_anomalies"]), dict(d["anomaly_class"]), d["setting"], int(d["shots"]),
                   d.get("seed"), d.get("seen_class"), catalog)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path, catalog: DatasetCatalog | None = None) -> "SplitResult":
        return cls.from_dict(json.loads(Path(path).read_text()), catalog)


def split_normals(catalog: DatasetCatalog, ratio: float = NORMAL_SPLIT_RATIO, rng=0
                  ) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """Train/test normal split; pre-split catalogs keep their original split."""
    if catalog.presplit:
        return catalog.normal_train, catalog.normal_test
    if not 0 < ratio < 1:
        raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
    rng, _ = _as_rng(rng)
    pool = sorted(catalog.normal_train + catalog.normal_test)
    if len(pool) < 2:
        raise DataError("need at least two normal samples to split")
    n_train = int(np.floor(ratio * len(pool)))
    n_train = min(max(n_train, 1), len(pool) - 1)
    perm = rng.permutation(len(pool))
    train = tuple(sorted(pool[i] for i in perm[:n_train]))
    test = tuple(sorted(pool[i] for i in perm[n_train:]))
    return train, test


def _class_map(catalog: DatasetCatalog) -> dict[str, str]:
    return {i: c for c in catalog.classes for i in catalog.anomalies[c]}


def sample_general(catalog: DatasetCatalog, shots: int, rng=0, ratio: float = NORMAL_SPLIT_RATIO
                   ) -> SplitResult:
    """Draw ``shots`` anomalies uniformly from all classes; the rest form the test set."""
    rng, seed = _as_rng(rng)
    train_n, test_n = split_normals(catalog, ratio, rng)
    pool = catalog.all_anomalies
    if shots > len(pool):
        raise DataError(f"{shots} shots requested but only {len(pool)} anomalies exist")
    picked = rng.choice(len(pool), size=shots, replace=False)
    train_a = tuple(pool[i] for i in sorted(picked))
    chosen = set(train_a)
    test_a = tuple(i for i in pool if i not in chosen)
    if not test_a:
        warnings.warn("all anomalies were drawn for training; the test set has no anomalies")
    return SplitResult(train_n, train_a, test_n, test_a, _class_map(catalog), "general", shots,
                       seed, None, catalog)


def sample_hard(catalog: DatasetCatalog, shots: int, seen_class: str, rng=0,
                ratio: float = NORMAL_SPLIT_RATIO) -> SplitResult:
    """Draw ``shots`` anomalies from ``seen_class``; test only on the other classes."""
    if len(catalog.anomalies) < 2:
        raise DataError("the hard setting needs at least two anomaly classes")
    if seen_class not in catalog.anomalies:
        raise DataError(f"seen class {seen_class!r} not in {list(catalog.classes)}")
    rng, seed = _as_rng(rng)
    train_n, test_n = split_normals(catalog, ratio, rng)
    pool = catalog.anomalies[seen_class]
    if shots > len(pool):
        raise DataError(f"{shots} shots requested but class {seen_class!r} has {len(pool)}")
    picked = rng.choice(len(pool), size=shots, replace=False)
    train_a = tuple(pool[i] for i in sorted(picked))
    test_a = tuple(i for c in catalog.classes if c != seen_class for i in catalog.anomalies[c])
    return SplitResult(train_n, train_a, test_n, test_a, _class_map(catalog), "hard", shots,
                       seed, seen_class, catalog)


def nest_one_from_ten(ten_split: SplitResult, rng=0) -> SplitResult:
    """One-shot split drawn from a ten-shot split, evaluated on the same test data."""
    if ten_split.shots != 10 or len(ten_split.train_anomalies) != 10:
        raise DataError("nesting needs a ten-shot split")
    rng, _ = _as_rng(rng)
    one = ten_split.train_anomalies[int(rng.integers(10))]
    return SplitResult(ten_split.train_normals, (one,), ten_split.test_normals,
                       ten_split.test_anomalies, ten_split.anomaly_class, ten_split.setting, 1,
                       ten_split.seed, ten_split.seen_class, ten_split.catalog)


# ---------------------------------------------------------------------------
# synthetic data

# Defect recipes. ``size`` is the defect's extent in pixels (disc diameter,
# scratch length, checker side); the ranges are disjoint so each class is
# identifiable from its recipe alone.
DEFECT_RECIPES = {
    "blob": {"size": (5, 8), "desc": "filled disc in a saturated random hue"},
    "scratch": {"size": (12, 20), "desc": "one-pixel dark line at a random angle"},
    "checker": {"size": (9, 11), "desc": "square of 2-pixel light/dark checker cells"},
    "stain": {"size": (21, 26), "desc": "large faint brownish ellipse"},
}


@dataclass(frozen=True)
class SynthSpec:
    n_normal_train: int = 200
    n_normal_test: int = 80
    n_per_class: int = 40
    classes: tuple[str, ...] = ("blob", "scratch", "checker")
    size: int = 32
    seed: int = 0
    contrast: float = 0.5

    def __post_init__(self):
        if len(self.classes) < 1:
            raise ConfigError("need at least one anomaly class")
        unknown = set(self.classes) - set(DEFECT_RECIPES)
        if unknown:
            raise ConfigError(f"unknown defect classes {sorted(unknown)}; have {sorted(DEFECT_RECIPES)}")
        if self.size < 32:
            raise ConfigError("synthetic images must be at least 32 pixels wide")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = np.array([0.55, 0.50, 0.42]) + rng.uniform(-0.03, 0.03, size=3)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(0.12, 0.2)
    phase = rng.uniform(0, 2 * np.pi)
    wave = 0.06 * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = base[:, None, None] + wave[None] + rng.normal(0, 0.015, size=(3, size, size))
    return img


def _render_defect(img: np.ndarray, kind: str, rng: np.random.Generator, contrast: float = 1.0) -> dict:
    size = img.shape[-1]
    lo, hi = DEFECT_RECIPES[kind]["size"]
    extent = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    margin = extent // 2 + 1
    cy, cx = (float(v) for v in rng.uniform(margin, size - margin, size=2))
    if kind == "blob":
        hue = rng.uniform(0, 1)
        color = hsv_color(hue, 0.9, 0.9)
        region = (yy - cy) ** 2 + (xx - cx) ** 2 <= (extent / 2) ** 2
        img[:, region] = 0.2 * img[:, region] + 0.8 * color[:, None]
        params = {"hue": hue}
    elif kind == "scratch":
        angle = rng.uniform(0, np.pi)
        t = np.linspace(-extent / 2, extent / 2, 4 * extent)
        rows = np.clip(np.round(cy + t * np.sin(angle)).astype(int), 0, size - 1)
        cols = np.clip(np.round(cx + t * np.cos(angle)).astype(int), 0, size - 1)
        region = np.zeros((size, size), bool)
        region[rows, cols] = True
        level = rng.uniform(0.55, 0.7) ** contrast
        img[:, region] *= level
        params = {"angle": angle, "level": level}
    elif kind == "checker":
        top, left = int(cy - extent / 2), int(cx - extent / 2)
        region = np.zeros((size, size), bool)
        region[top:top + extent, left:left + extent] = True
        cells = ((yy - top) // 2 + (xx - left) // 2) % 2 == 0
        amp = rng.uniform(0.1, 0.14) * contrast
        img[:, region & cells] += amp
        img[:, region & ~cells] -= amp
        params = {"amplitude": amp}
    else:  # stain
        a, b = extent / 2, extent / 3
        angle = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(angle) + dy * np.sin(angle)
        v = -dx * np.sin(angle) + dy * np.cos(angle)
        region = (u / a) ** 2 + (v / b) ** 2 <= 1
        img[:, region] = 0.7 * img[:, region] + 0.3 * np.array([0.35, 0.22, 0.1])[:, None]
        params = {"angle": angle}
    return {"kind": kind, "size": extent, "center": [cy, cx], "pixels": int(region.sum()), **params}


def hsv_color(h: float, s: float, v: float) -> np.ndarray:
    from matplotlib.colors import hsv_to_rgb

    return hsv_to_rgb(np.array([h, s, v]))


def _quantize(img: np.ndarray) -> np.ndarray:
    u8 = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return u8.astype(np.float32) / 255.0


def synth_generate(spec: SynthSpec = SynthSpec()) -> DatasetCatalog:
    """Procedurally rendered dataset; images are 8-bit exact and seed-deterministic."""
    rng = np.random.default_rng(spec.seed)
    images, recipes = {}, {}

    def render(ident: str, kind: str | None) -> None:
        img = _background(rng, spec.size)
        recipes[ident] = _render_defect(img, kind, rng, spec.contrast) if kind else {"kind": "good"}
        images[ident] = _quantize(img)

    train = tuple(f"train/good/{i:04d}" for i in range(spec.n_normal_train))
    test = tuple(f"test/good/{i:04d}" for i in range(spec.n_normal_test))
    for ident in train + test:
        render(ident, None)
    anomalies = {}
    for c in spec.classes:
        anomalies[c] = tuple(f"test/{c}/{i:04d}" for i in range(spec.n_per_class))
        for ident in anomalies[c]:
            render(ident, c)
    return DatasetCatalog("synthetic", train, test, anomalies, presplit=True, image_size=spec.size,
                          images=images, recipes=recipes)


def write_dataset(catalog: DatasetCatalog, root: str | Path) -> DatasetCatalog:
    """Materialize an in-memory catalog as PNG files plus ``manifest.csv``."""
    root = Path(root)
    paths = {}
    ids = catalog.normal_train + catalog.normal_test + catalog.all_anomalies
    for ident in ids:
        p = root / f"{ident}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        arr = np.round(catalog.load(ident).transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(p, optimize=False)
        paths[ident] = str(p)
    rel = DatasetCatalog(catalog.name, catalog.normal_train, catalog.normal_test, catalog.anomalies,
                         catalog.presplit, catalog.image_size,
                         {i: f"{i}.png" for i in ids})
    write_manifest(rel, root / "manifest.csv")
    out = DatasetCatalog(catalog.name, catalog.normal_train, catalog.normal_test, catalog.anomalies,
                         catalog.presplit, catalog.image_size, paths)
    if catalog.recipes:
        (root / "recipes.json").write_text(json.dumps(catalog.recipes, indent=1, sort_keys=True) + "\n")
    return out
