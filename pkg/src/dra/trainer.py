"""Joint training of the backbone and all enabled heads, plus checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .container import IncompatibleVersionError, load_container, save_container
from .errors import ConfigError, NumericError, StateError
from .featurenet import PYRAMID_SCALES, BackboneConfig, pyramid_views
from .heads import AblationMask
from .losses import NORMAL, PSEUDO, SEEN, LossConfig, PriorScoreSet, route_and_total
from .model import DRAModel
from .protocols import SplitResult
from .pseudogen import OutlierPool, PseudoSource

log = logging.getLogger(__name__)

BATCH_GRANULARITY = 4


@dataclass
class TrainConfig:
    epochs: int = 30
    iterations_per_epoch: int = 20
    batch_size: int = 48
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    k_fraction: float = 0.10
    n_reference: int = 5
    reference_mix: bool = True
    preset: str = "DRA"
    loss: str = "deviation"
    margin: float = 5.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    prior_samples: int = 5000
    freeze_prior: bool = False
    pseudo_source: str = "cutmix"
    backbone: str = "resnet18"
    backbone_weights: str | None = None
    freeze_backbone: bool = False
    image_size: int = 224
    scales: tuple[float, ...] = PYRAMID_SCALES
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and iterations_per_epoch >= 1")
        if self.batch_size < BATCH_GRANULARITY or self.batch_size % BATCH_GRANULARITY:
            raise ConfigError(f"batch_size must be a positive multiple of {BATCH_GRANULARITY}")
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if not 0 < self.k_fraction <= 1:
            raise ConfigError("k_fraction must lie in (0, 1]")
        if self.n_reference < 1:
            raise ConfigError("n_reference must be >= 1")
        self.mask  # validates the preset
        LossConfig(self.loss)

    @property
    def mask(self) -> AblationMask:
        return AblationMask.preset(self.preset)

    @property
    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.margin, self.focal_gamma, self.focal_alpha)

    @property
    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone, self.backbone_weights, freeze=self.freeze_backbone)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    images: np.ndarray
    roles: list[str]
    ids: list[str]

    def __len__(self) -> int:
        return len(self.roles)


class NormalSampler:
    """Draws normals without replacement, reshuffling once the pool is spent."""

    def __init__(self, ids, rng: np.random.Generator):
        self.ids = list(ids)
        self.rng = rng
        self._queue: list[str] = []

    def draw(self, n: int) -> list[str]:
        out = []
        while len(out) < n:
            if not self._queue:
                self._queue = [self.ids[i] for i in self.rng.permutation(len(self.ids))]
            out.append(self._queue.pop())
        return out


def batch_composition(batch_size: int, mask: AblationMask) -> dict[str, int]:
    if batch_size % BATCH_GRANULARITY:
        raise ConfigError(f"batch_size must be a multiple of {BATCH_GRANULARITY}")
    quarter = batch_size // 4
    n_seen = quarter if mask.seen else 0
    n_pseudo = quarter if mask.pseudo else 0
    return {NORMAL: batch_size - n_seen - n_pseudo, SEEN: n_seen, PSEUDO: n_pseudo}


def make_batch(split: SplitResult, pseudo: PseudoSource, batch_size: int, rng: np.random.Generator,
               mask: AblationMask = AblationMask(), sampler: NormalSampler | None = None) -> Batch:
    """Half normals, a quarter seen anomalies, a quarter pseudo anomalies.

    Seen anomalies are drawn with replacement. Quotas of disabled heads go
    to normals.
    """
    if split.catalog is None:
        raise StateError("split has no catalog attached")
    if not split.train_normals:
        raise ConfigError("split has no training normals")
    comp = batch_composition(batch_size, mask)
    if comp[SEEN] and not split.train_anomalies:
        raise ConfigError("seen head enabled but the split has no labeled anomalies; disable it")
    sampler = sampler or NormalSampler(split.train_normals, rng)
    cat = split.catalog
    ids = sampler.draw(comp[NORMAL])
    images = [cat.load(i) for i in ids]
    roles = [NORMAL] * comp[NORMAL]
    for j in rng.integers(0, len(split.train_anomalies), size=comp[SEEN]):
        ident = split.train_anomalies[j]
        ids.append(ident)
        images.append(cat.load(ident))
        roles.append(SEEN)
    for j in rng.integers(0, len(split.train_normals), size=comp[PSEUDO]):
        base = split.train_normals[j]
        ids.append(f"pseudo:{base}")
        images.append(pseudo.generate(cat.load(base), rng))
        roles.append(PSEUDO)
    return Batch(np.stack(images).astype(np.float32), roles, ids)


class NonFiniteLossError(NumericError):
    def __init__(self, per_scale: list[dict[str, float]]):
        super().__init__(f"non-finite training loss; per-head losses by scale: {per_scale}")
        self.per_scale = per_scale


def train_step(model: DRAModel, optimizer: torch.optim.Optimizer, batch: Batch,
               config: TrainConfig, prior: PriorScoreSet | None) -> tuple[float, dict[str, float]]:
    """One optimizer step on the joint objective, averaged over pyramid scales."""
    if "residual" in model.heads and model.refset is None:
        raise StateError("reference set must be initialized before training the residual head")
    model.train()
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(batch.images).to(dtype)
    optimizer.zero_grad(set_to_none=True)
    total = 0.0
    per_scale = []
    for outputs in model(x):
        loss, per_head = route_and_total(outputs, batch.roles, model.mask, config.loss_config, prior)
        total = total + loss
        per_scale.append(per_head)
    total = total / len(per_scale)
    if not torch.isfinite(total):
        raise NonFiniteLossError(per_scale)
    if total.requires_grad:
        total.backward()
        if config.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
        optimizer.step()
    heads = {h: float(np.mean([p[h] for p in per_scale if h in p]))
             for h in model.mask.enabled if any(h in p for p in per_scale)}
    return float(total.detach()), heads


def make_optimizer(model: DRAModel, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def make_pseudo_source(config: TrainConfig, pool_dir: str | None = None,
                       exclude_file: str | None = None) -> PseudoSource:
    pool = None
    if config.pseudo_source == "outlier_pool":
        if pool_dir is None:
            raise ConfigError("outlier_pool pseudo source needs a pool directory")
        pool = OutlierPool.from_directory(pool_dir, config.image_size, exclude_file)
    return PseudoSource(config.pseudo_source, pool=pool)


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("batches", "prior", "reference")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))))


def build_model(config: TrainConfig) -> DRAModel:
    return DRAModel(config.backbone_config, config.mask, config.k_fraction, config.scales, config.seed)


def init_reference(model: DRAModel, split: SplitResult, pseudo: PseudoSource, config: TrainConfig,
                   rng: np.random.Generator) -> None:
    """Sample the reference set once; with mixing, about half are pseudo anomalies."""
    cat = split.catalog
    n = config.n_reference
    n_pseudo = n // 2 if config.reference_mix else 0
    picks = rng.choice(len(split.train_normals), size=n, replace=len(split.train_normals) < n)
    images, roles = [], []
    for k, j in enumerate(picks):
        img = cat.load(split.train_normals[j])
        if k >= n - n_pseudo:
            images.append(pseudo.generate(img, rng))
            roles.append(PSEUDO)
        else:
            images.append(img)
            roles.append(NORMAL)
    model.set_reference(np.stack(images).astype(np.float32), roles)


@dataclass
class TrainingLog:
    records: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: dict, path: Path | None = None) -> None:
        self.records.append(record)
        if path is not None:
            with open(path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    @property
    def mean_losses(self) -> list[float]:
        return [r["mean_loss"] for r in self.records]


def fit(split: SplitResult, config: TrainConfig, pseudo: PseudoSource | None = None,
        log_path: str | Path | None = None, model: DRAModel | None = None
        ) -> tuple[DRAModel, TrainingLog]:
    """Train for ``epochs x iterations_per_epoch`` steps; returns model and per-epoch log."""
    pseudo = pseudo or make_pseudo_source(config)
    rngs = _streams(config.seed)
    model = model or build_model(config)
    if "residual" in model.heads and model.refset is None:
        init_reference(model, split, pseudo, config, rngs["reference"])
    history = TrainingLog()
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    if config.epochs == 0:
        return model, history
    optimizer = make_optimizer(model, config)
    sampler = NormalSampler(split.train_normals, rngs["batches"])
    prior = PriorScoreSet.draw(rngs["prior"], config.prior_samples)
    for epoch in range(config.epochs):
        losses, heads = [], {}
        for _ in range(config.iterations_per_epoch):
            batch = make_batch(split, pseudo, config.batch_size, rngs["batches"], model.mask, sampler)
            if not config.freeze_prior:
                prior = PriorScoreSet.draw(rngs["prior"], config.prior_samples)
            loss, per_head = train_step(model, optimizer, batch, config, prior)
            losses.append(loss)
            for h, v in per_head.items():
                heads.setdefault(h, []).append(v)
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                  "per_head_losses": {h: float(np.mean(v)) for h, v in heads.items()}}
        history.append(record, log_path)
        log.info("epoch %d mean loss %.4f", epoch, record["mean_loss"])
    return model, history


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_KIND = "dra-checkpoint"


class IncompatibleCheckpointError(IncompatibleVersionError):
    pass


def checkpoint_save(model: DRAModel, config: TrainConfig, path: str | Path) -> str:
    """Write a checkpoint; returns the hash of the config echo."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    echo = {"train": config.to_dict(), "backbone": model.config.to_dict(),
            "heads": list(model.mask.enabled), "scales": list(model.scales),
            "k_fraction": model.k_fraction, "dtype": str(next(model.parameters()).dtype),
            "prior": {"mean": 0.0, "std": 1.0, "samples": config.prior_samples,
                      "freeze": config.freeze_prior}}
    if model.refset is not None:
        arrays["refset/images"] = model.refset.images
        for (h, w), m in model.refset.maps.items():
            arrays[f"refset/map/{h}x{w}"] = m.cpu().numpy()
        echo["refset_roles"] = list(model.refset.roles)
    save_container(path, arrays, echo, kind=CHECKPOINT_KIND)
    return config.hash()


def checkpoint_load(path: str | Path, mask: AblationMask | None = None
                    ) -> tuple[DRAModel, TrainConfig]:
    """Restore model and config. ``mask`` must be covered by the saved heads."""
    from .heads import ReferenceSet

    arrays, meta = load_container(path, kind=CHECKPOINT_KIND)
    echo = meta["config"]
    tr = dict(echo["train"])
    tr["scales"] = tuple(tr["scales"])
    config = TrainConfig.from_dict(tr)
    saved = set(echo["heads"])
    mask = mask or config.mask
    missing = set(mask.enabled) - saved
    if missing:
        raise IncompatibleCheckpointError(f"{path}: no parameters stored for heads {sorted(missing)}")
    bb = dict(echo["backbone"])
    bb["weights_path"] = None  # weights come from the checkpoint itself
    model = DRAModel(BackboneConfig(**bb), mask, echo["k_fraction"], tuple(echo["scales"]), config.seed)
    if echo.get("dtype") == "torch.float64":
        model.double()
    state = model.state_dict()
    loaded = {}
    for k in state:
        key = f"param/{k}"
        if key not in arrays:
            raise IncompatibleCheckpointError(f"{path}: missing array {key}")
        loaded[k] = torch.from_numpy(np.array(arrays[key]))
    model.load_state_dict(loaded)
    if "refset/images" in arrays:
        maps = {}
        for k, v in arrays.items():
            if k.startswith("refset/map/"):
                h, w = k.rsplit("/", 1)[1].split("x")
                maps[(int(h), int(w))] = torch.from_numpy(np.array(v))
        model.refset = ReferenceSet(arrays["refset/images"], maps, echo.get("refset_roles"))
    elif "residual" in mask:
        raise IncompatibleCheckpointError(f"{path}: residual head requested but no reference set stored")
    return model, config
