import json

import numpy as np
import pytest
import torch

import dra.container as container
from dra.container import IncompatibleVersionError, IntegrityError, load_container
from dra.errors import ConfigError, NumericError, StateError
from dra.heads import AblationMask
from dra.losses import NORMAL, PSEUDO, SEEN, LossConfig, PriorScoreSet, route_and_total
from dra.protocols import DatasetCatalog, nest_one_from_ten, sample_general, sample_hard
from dra.pseudogen import PseudoSource
from dra.trainer import (Batch, IncompatibleCheckpointError, NormalSampler, TrainConfig, batch_composition,
                         build_model, checkpoint_load, checkpoint_save, fit, init_reference, make_batch,
                         train_step)


def tiny_config(**kw):
    base = dict(backbone="tiny", image_size=32, epochs=2, iterations_per_epoch=3, batch_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


@pytest.fixture(scope="module")
def hard_split(small_catalog):
    return sample_hard(small_catalog, 10, "blob", 0)


# --- config -----------------------------------------------------------------

def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.epochs, c.iterations_per_epoch, c.batch_size) == (30, 20, 48)
    assert (c.learning_rate, c.weight_decay, c.k_fraction, c.n_reference) == (1e-3, 1e-2, 0.1, 5)
    for bad in (dict(batch_size=46), dict(learning_rate=0.0), dict(k_fraction=0.0), dict(preset="DRA9"),
                dict(loss="hinge"), dict(n_reference=0), dict(epochs=-1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_config_round_trip_and_hash():
    c = tiny_config(preset="DRA3Ar", loss="focal")
    back = TrainConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert back == c and back.hash() == c.hash()
    assert tiny_config(seed=1).hash() != c.hash()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


# --- batches ----------------------------------------------------------------

def test_batch_composition():
    assert batch_composition(48, AblationMask()) == {NORMAL: 24, SEEN: 12, PSEUDO: 12}
    assert batch_composition(48, AblationMask.preset("DRA1A")) == {NORMAL: 36, SEEN: 12, PSEUDO: 0}
    with pytest.raises(ConfigError):
        batch_composition(10, AblationMask())


def test_make_batch_roles_and_one_shot(small_catalog, rng):
    one = nest_one_from_ten(sample_hard(small_catalog, 10, "blob", 0), 0)
    b = make_batch(one, PseudoSource(), 48, rng)
    assert len(b) == 48 and b.images.shape == (48, 3, 32, 32) and b.images.dtype == np.float32
    assert b.roles.count(NORMAL) == 24 and b.roles.count(SEEN) == 12 and b.roles.count(PSEUDO) == 12
    seen_ids = {i for i, r in zip(b.ids, b.roles) if r == SEEN}
    assert seen_ids == set(one.train_anomalies)


def test_make_batch_without_pseudo_head(hard_split, rng):
    b = make_batch(hard_split, PseudoSource(), 16, rng, AblationMask.preset("DRA1A"))
    assert b.roles.count(NORMAL) == 12 and PSEUDO not in b.roles


def test_make_batch_needs_anomalies_for_seen_head(small_catalog, rng):
    empty = sample_general(small_catalog, 0, 0)
    with pytest.raises(ConfigError):
        make_batch(empty, PseudoSource(), 16, rng)


def test_normal_sampler_exhausts_pool_before_repeating(rng):
    s = NormalSampler(list("abcdefg"), rng)
    first = s.draw(7)
    assert sorted(first) == list("abcdefg")
    assert len(s.draw(10)) == 10


# --- steps ------------------------------------------------------------------

def test_zero_learning_rate_leaves_params_unchanged(hard_split, rng):
    cfg = tiny_config()
    model = build_model(cfg)
    init_reference(model, hard_split, PseudoSource(), cfg, rng)
    before = _state(model)
    opt = torch.optim.Adam(model.parameters(), lr=0.0)
    batch = make_batch(hard_split, PseudoSource(), 16, rng)
    loss, _ = train_step(model, opt, batch, cfg, PriorScoreSet.draw(rng))
    after = model.state_dict()
    assert np.isfinite(loss)
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_all_normal_step_is_finite_and_nonnegative(hard_split, rng):
    cfg = tiny_config()
    model = build_model(cfg)
    init_reference(model, hard_split, PseudoSource(), cfg, rng)
    imgs = hard_split.catalog.load_many(hard_split.train_normals[:8])
    batch = Batch(imgs, [NORMAL] * 8, list(hard_split.train_normals[:8]))
    loss, per_head = train_step(model, torch.optim.Adam(model.parameters()), batch, cfg, PriorScoreSet.draw(rng))
    assert np.isfinite(loss) and loss >= 0
    assert set(per_head) == {"seen", "pseudo", "residual", "normal"}


def test_residual_head_needs_reference(hard_split, rng):
    cfg = tiny_config()
    model = build_model(cfg)
    batch = make_batch(hard_split, PseudoSource(), 16, rng)
    with pytest.raises(StateError):
        train_step(model, torch.optim.Adam(model.parameters()), batch, cfg, PriorScoreSet.draw(rng))


def test_nonfinite_scores_abort(hard_split, rng):
    cfg = tiny_config(preset="DRA1A")
    model = build_model(cfg)
    with torch.no_grad():
        model.heads["seen"].conv.bias.fill_(float("nan"))
    batch = make_batch(hard_split, PseudoSource(), 16, rng, cfg.mask)
    with pytest.raises(NumericError):
        train_step(model, torch.optim.Adam(model.parameters()), batch, cfg, PriorScoreSet.draw(rng))


def test_seen_only_step_leaves_other_heads_untouched(hard_split, rng):
    cfg = tiny_config()
    model = build_model(cfg)
    init_reference(model, hard_split, PseudoSource(), cfg, rng)
    opt = torch.optim.Adam(model.parameters(), lr=1e-2, weight_decay=1e-2)
    before = _state(model)
    batch = make_batch(hard_split, PseudoSource(), 16, rng, AblationMask.preset("DRA1A"))
    x = torch.as_tensor(batch.images)
    opt.zero_grad(set_to_none=True)
    outputs = model.head_outputs(x)
    loss, _ = route_and_total({"seen": outputs["seen"]}, batch.roles, AblationMask.preset("DRA1A"),
                              LossConfig(), PriorScoreSet.draw(rng))
    loss.backward()
    opt.step()
    after = model.state_dict()
    for k in before:
        if k.startswith(("heads.pseudo", "heads.residual", "heads.normal")):
            assert torch.equal(before[k], after[k]), k
    assert not all(torch.equal(before[k], after[k]) for k in before if k.startswith("heads.seen"))
    assert not all(torch.equal(before[k], after[k]) for k in before if k.startswith("backbone"))


def test_disabled_heads_own_no_parameters():
    for preset in ("DRA1A", "DRA2A", "DRA3Ar", "DRA3An", "DRA"):
        cfg = tiny_config(preset=preset)
        model = build_model(cfg)
        heads = {k.split(".")[1] for k, _ in model.named_parameters() if k.startswith("heads.")}
        assert heads == set(cfg.mask.enabled)


def test_gradient_clipping_runs(hard_split, rng):
    cfg = tiny_config(max_grad_norm=0.5, epochs=1, iterations_per_epoch=2)
    _, log = fit(hard_split, cfg)
    assert len(log) == 1 and np.isfinite(log.mean_losses[0])


# --- fit --------------------------------------------------------------------

def test_zero_epochs_returns_initial_model(hard_split):
    cfg = tiny_config(epochs=0)
    model, log = fit(hard_split, cfg)
    fresh = build_model(cfg)
    assert len(log) == 0
    fs = fresh.state_dict()
    assert all(torch.equal(v, fs[k]) for k, v in model.state_dict().items())


def test_fit_is_deterministic_and_logs_each_epoch(hard_split, tmp_path):
    cfg = tiny_config(epochs=3)
    m1, log1 = fit(hard_split, cfg, log_path=tmp_path / "log.jsonl")
    m2, log2 = fit(hard_split, cfg)
    assert log1.records == log2.records
    assert len(log1) == 3
    lines = [json.loads(ln) for ln in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == log1.records
    assert set(lines[0]) == {"epoch", "mean_loss", "per_head_losses"}
    s2 = m2.state_dict()
    assert all(torch.equal(v, s2[k]) for k, v in m1.state_dict().items())


def test_reference_map_is_write_once(hard_split, rng):
    cfg = tiny_config(epochs=2)
    model = build_model(cfg)
    init_reference(model, hard_split, PseudoSource(), cfg, rng)
    maps = {k: v.clone() for k, v in model.refset.maps.items()}
    assert model.refset.roles.count(PSEUDO) == 2 and len(model.refset.roles) == 5
    fit(hard_split, cfg, model=model)
    assert all(torch.equal(maps[k], model.refset.maps[k]) for k in maps)
    with pytest.raises(RuntimeError):
        model.set_reference(model.refset.images)


def test_training_reduces_loss(hard_split):
    improved = 0
    for seed in range(3):
        _, log = fit(hard_split, tiny_config(epochs=6, iterations_per_epoch=8, seed=seed))
        improved += log.mean_losses[-1] < log.mean_losses[0]
    assert improved >= 2


def _separable_catalog(n=40, size=32, seed=0):
    """Dark noisy normals versus a bright 8x8 square on the same background."""
    r = np.random.default_rng(seed)
    images, normals, anomalies = {}, [], []
    for i in range(n):
        noise = r.normal(0, 0.01, (3, size, size)).astype(np.float32)
        images[f"n{i}"] = np.float32(0.05) + noise
        img = np.full((3, size, size), 0.05, np.float32)
        t, left = r.integers(0, size - 8, size=2)
        img[:, t:t + 8, left:left + 8] = 1.0
        images[f"a{i}"] = img
        normals.append(f"n{i}")
        anomalies.append(f"a{i}")
    return DatasetCatalog("sep", tuple(normals), (), {"square": tuple(anomalies)}, presplit=False, images=images)


def test_separable_problem_converges():
    cat = _separable_catalog()
    wins = 0
    for seed in range(3):
        split = sample_general(cat, 10, seed)
        cfg = tiny_config(preset="DRA1A", weight_decay=0.0, freeze_backbone=True, epochs=10,
                          iterations_per_epoch=20, seed=seed, learning_rate=1e-2)
        _, log = fit(split, cfg)
        wins += log.records[-1]["per_head_losses"]["seen"] < 0.1
    assert wins >= 2


# --- checkpoints ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(hard_split, tmp_path_factory):
    cfg = tiny_config(epochs=1, iterations_per_epoch=2)
    model, _ = fit(hard_split, cfg)
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    digest = checkpoint_save(model, cfg, path)
    return model, cfg, path, digest


def test_checkpoint_round_trip_is_bitwise(trained, hard_split):
    model, cfg, path, digest = trained
    probe = hard_split.catalog.load_many(hard_split.test_ids[:12])
    loaded, cfg2 = checkpoint_load(path)
    assert cfg2 == cfg and digest == cfg.hash()
    a, ha = model.score(probe)
    b, hb = loaded.score(probe)
    assert a.tobytes() == b.tobytes()
    assert [h.per_scale for h in ha] == [h.per_scale for h in hb]
    assert all(torch.equal(model.refset.maps[k], loaded.refset.maps[k]) for k in model.refset.maps)


def test_checkpoint_config_echo(trained):
    model, cfg, path, _ = trained
    _, meta = load_container(path)
    echo = meta["config"]
    assert echo["train"] == cfg.to_dict()
    assert echo["heads"] == list(cfg.mask.enabled)
    assert echo["refset_roles"] == list(model.refset.roles)


def test_checkpoint_missing_heads(tmp_path, hard_split):
    cfg = tiny_config(preset="DRA1A", epochs=0)
    model, _ = fit(hard_split, cfg)
    checkpoint_save(model, cfg, tmp_path / "one.npz")
    loaded, _ = checkpoint_load(tmp_path / "one.npz")
    assert set(loaded.heads) == {"seen"}
    with pytest.raises(IncompatibleCheckpointError):
        checkpoint_load(tmp_path / "one.npz", AblationMask.preset("DRA2A"))


def test_checkpoint_subset_mask_loads(trained):
    _, _, path, _ = trained
    loaded, _ = checkpoint_load(path, AblationMask.preset("DRA2A"))
    assert set(loaded.heads) == {"seen", "pseudo"}


def test_checkpoint_corruption_and_version(trained, tmp_path, monkeypatch):
    model, cfg, path, _ = trained
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 3] ^= 0x5A
    (tmp_path / "bad.npz").write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        checkpoint_load(tmp_path / "bad.npz")
    monkeypatch.setattr(container, "FORMAT_VERSION", "2.0")
    checkpoint_save(model, cfg, tmp_path / "future.npz")
    monkeypatch.undo()
    with pytest.raises(IncompatibleVersionError):
        checkpoint_load(tmp_path / "future.npz")
