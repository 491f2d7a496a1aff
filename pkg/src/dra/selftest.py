"""Fast oracle and invariant checks runnable from an installed package.

Each check compares a library routine against an independent brute-force
computation on random inputs. ``dra selftest`` runs them all; the full
pytest suite covers much more.
"""

from __future__ import annotations

import time

import numpy as np
import torch

from .evaluation import auc
from .featurenet import BackboneConfig, build_backbone
from .heads import (PatchClassifier, ReferenceSet, compute_reference_map, residual_map, residual_score,
                    topk_mil_pool)
from .losses import PriorScoreSet, deviation_loss
from .protocols import SynthSpec, nest_one_from_ten, sample_general, sample_hard, synth_generate
from .pseudogen import CutMixParams, JitterParams, cutmix


def check_topk(rng) -> str:
    worst = 0.0
    for _ in range(300):
        h, w = rng.integers(1, 33, size=2)
        k = rng.choice([0.05, 0.1, 0.5, 1.0])
        s = rng.normal(size=(h, w))
        n = max(1, int(np.floor(k * h * w)))
        expect = np.sort(s.ravel())[::-1][:n].mean()
        worst = max(worst, abs(float(topk_mil_pool(torch.from_numpy(s), k)) - expect))
    assert worst <= 1e-12, worst
    return f"max abs error {worst:.1e}"


def check_auc(rng) -> str:
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 120))
        y = rng.integers(0, 2, size=n)
        y[:2] = [0, 1]
        s = rng.integers(0, 10, size=n).astype(float)
        pos, neg = s[y == 1], s[y == 0]
        pairs = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
        worst = max(worst, abs(auc((y, s)) - pairs / (len(pos) * len(neg))))
    assert worst <= 1e-9, worst
    return f"max abs error {worst:.1e}"


def check_deviation_gradient(rng) -> str:
    worst = 0.0
    prior = PriorScoreSet.draw(rng, 5000)
    for _ in range(100):
        a = rng.uniform(1, 6)
        y = int(rng.integers(0, 2))
        s = rng.normal(0, 4)
        kink = prior.mu + a * prior.sigma if y else prior.mu
        if abs(s - kink) < 1e-2:
            s += 0.1
        t = torch.tensor(s, dtype=torch.float64, requires_grad=True)
        deviation_loss(t, y, prior, a).backward()
        eps = 1e-6
        fd = (deviation_loss(s + eps, y, prior, a) - deviation_loss(s - eps, y, prior, a)) / (2 * eps)
        g = float(t.grad)
        worst = max(worst, abs(g - fd) / max(abs(fd), 1e-12) if fd else abs(g))
    assert worst <= 1e-4, worst
    return f"max relative error {worst:.1e}"


def check_cutmix_identity(rng) -> str:
    params = CutMixParams(jitter=JitterParams.identity(), translate=False)
    for _ in range(50):
        x = rng.random((3, 32, 32)).astype(np.float32)
        assert np.array_equal(cutmix(x, rng, params), x)
    for _ in range(50):
        x = rng.random((3, 32, 32)).astype(np.float32)
        out, m = cutmix(x, rng, return_mask=True)
        assert np.array_equal(out[:, ~m], x[:, ~m])
    return "identity and untouched-complement hold"


def check_protocols(rng) -> str:
    for k in range(10):
        cat = synth_generate(SynthSpec(n_normal_train=8, n_normal_test=4, n_per_class=12, size=32, seed=k))
        g = sample_general(cat, 10, k)
        assert not set(g.train_anomalies) & set(g.test_anomalies)
        seen = cat.classes[k % len(cat.classes)]
        h = sample_hard(cat, 10, seen, k)
        assert all(h.anomaly_class[i] != seen for i in h.test_anomalies)
        one = nest_one_from_ten(h, k)
        assert one.test_anomalies == h.test_anomalies and one.test_normals == h.test_normals
        assert set(one.train_anomalies) <= set(h.train_anomalies)
    return "no violations"


def check_residual(rng) -> str:
    a = torch.from_numpy(rng.normal(size=(4, 3, 3)))
    b = torch.from_numpy(rng.normal(size=(4, 3, 3)))
    assert torch.equal(residual_map(a, b), -residual_map(b, a))
    net = build_backbone(BackboneConfig("tiny", channels=4), seed=0).double()
    refs = rng.random((3, 3, 16, 16))
    m_r = compute_reference_map(refs, net)
    with torch.no_grad():
        oracle = np.mean([net(torch.from_numpy(r)[None])[0].numpy() for r in refs], axis=0)
    err = float(np.abs(m_r.numpy() - oracle).max())
    assert err <= 1e-12, err
    head = PatchClassifier(4).double()
    with torch.no_grad():
        head.conv.bias.zero_()
    refset = ReferenceSet(refs, {tuple(m_r.shape[-2:]): m_r})
    with torch.no_grad():
        assert float(residual_score(m_r.clone(), refset, head)) == 0.0
    return f"reference mean error {err:.1e}"


CHECKS = {
    "top-K MIL pooling vs sort oracle": check_topk,
    "rank-sum AUC vs pair counting": check_auc,
    "deviation loss gradient vs finite differences": check_deviation_gradient,
    "CutMix identity and complement": check_cutmix_identity,
    "protocol disjointness and nesting": check_protocols,
    "residual machinery": check_residual,
}


def run_all(seed: int = 0, verbose: bool = False) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            detail = fn(rng)
            status = "PASS"
        except AssertionError as exc:
            detail, status, ok = f"failed ({exc})", "FAIL", False
        line = f"{status}  {name}"
        if verbose:
            line += f"  [{detail}; {time.perf_counter() - t0:.2f}s]"
        print(line, flush=True)
    return ok
