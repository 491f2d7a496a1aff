import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dra.errors import ConsistencyError, DataError, InputShapeError, StateError
from dra.featurenet import extract_features
from dra.heads import (AblationMask, NormalityHead, PatchClassifier, ReferenceSet, composite_score,
                       compute_reference_map, global_pool, mil_score, normality_score, patch_scores,
                       pseudo_score, residual_map, residual_score, seen_score, topk_mil_pool)


def sort_oracle(scores, k_fraction):
    flat = np.sort(np.asarray(scores, dtype=np.float64).ravel())[::-1]
    k = max(1, int(np.floor(k_fraction * flat.size)))
    return flat[:k].mean()


def _classifier(weights, bias, dtype=torch.float64):
    clf = PatchClassifier(len(weights)).to(dtype)
    with torch.no_grad():
        clf.conv.weight.copy_(torch.tensor(weights, dtype=dtype).view(1, -1, 1, 1))
        clf.conv.bias.fill_(bias)
    return clf


# --- patch scores -----------------------------------------------------------

def test_zero_weights_give_bias_everywhere(rng):
    clf = _classifier([0.0] * 4, 0.7)
    out = patch_scores(torch.from_numpy(rng.normal(size=(4, 3, 5))), clf)
    assert out.shape == (3, 5)
    assert torch.all(out == 0.7)


def test_hand_dot_product():
    fmap = torch.tensor([[[1.0]], [[2.0]]], dtype=torch.float64)
    assert patch_scores(fmap, _classifier([0.5, -0.5], 0.0)).item() == -0.5


def test_patch_scores_commute_with_spatial_permutation(rng):
    fmap = torch.from_numpy(rng.normal(size=(3, 4, 4)))
    clf = _classifier(rng.normal(size=3).tolist(), 0.1)
    perm = torch.from_numpy(rng.permutation(16))
    permuted = fmap.reshape(3, 16)[:, perm].reshape(3, 4, 4)
    assert torch.equal(patch_scores(permuted, clf).reshape(16), patch_scores(fmap, clf).reshape(16)[perm])


def test_patch_channel_mismatch():
    with pytest.raises(InputShapeError):
        patch_scores(torch.zeros(3, 2, 2), PatchClassifier(4))


# --- top-K pooling ----------------------------------------------------------

def test_topk_examples():
    s = torch.arange(10, dtype=torch.float64) / 10
    assert topk_mil_pool(s.reshape(2, 5), 0.1).item() == pytest.approx(0.9, abs=0)
    assert topk_mil_pool(torch.tensor([[1.0, 4.0], [3.0, 2.0]]), 0.1).item() == 4.0
    assert topk_mil_pool(torch.full((3, 3), 2.5), 0.37).item() == 2.5


def test_topk_empty_and_bad_fraction():
    with pytest.raises(DataError):
        topk_mil_pool(torch.zeros(0, 3), 0.1)
    with pytest.raises(Exception):
        topk_mil_pool(torch.zeros(2, 2), 0.0)


def test_topk_full_fraction_is_mean(rng):
    for _ in range(500):
        h, w = rng.integers(1, 20, size=2)
        s = rng.normal(size=(h, w))
        assert abs(topk_mil_pool(torch.from_numpy(s), 1.0).item() - s.mean()) <= 1e-12


def test_topk_monotone(rng):
    for _ in range(500):
        s = rng.normal(size=(4, 5))
        k = rng.choice([0.05, 0.1, 0.5, 1.0])
        bumped = s.copy()
        bumped.flat[rng.integers(20)] += rng.exponential()
        assert topk_mil_pool(torch.from_numpy(bumped), k) >= topk_mil_pool(torch.from_numpy(s), k)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-1e6, 1e6)),
       st.sampled_from([0.05, 0.1, 0.25, 0.5, 1.0]), st.randoms(use_true_random=False))
def test_topk_permutation_invariant_and_matches_oracle(s, k, rnd):
    flat = s.ravel().tolist()
    rnd.shuffle(flat)
    shuffled = np.asarray(flat).reshape(s.shape)
    a = topk_mil_pool(torch.from_numpy(s), k).item()
    assert a == topk_mil_pool(torch.from_numpy(shuffled), k).item()
    assert a == pytest.approx(sort_oracle(s, k), rel=1e-12, abs=1e-9)


def test_topk_gradient_goes_to_selected_entries_lowest_index_on_ties():
    s = torch.tensor([[1.0, 3.0, 3.0], [0.0, 3.0, 2.0]], requires_grad=True)
    topk_mil_pool(s, 0.34).backward()  # K = floor(2.04) = 2 of three tied maxima
    assert s.grad.tolist() == [[0.0, 0.5, 0.5], [0.0, 0.0, 0.0]]


def test_topk_batch_matches_single(rng):
    s = torch.from_numpy(rng.normal(size=(5, 4, 4)))
    batched = topk_mil_pool(s, 0.1)
    assert torch.equal(batched, torch.stack([topk_mil_pool(x, 0.1) for x in s]))


# --- seen / pseudo heads ----------------------------------------------------

def test_mil_heads_degenerate_weights():
    fmap = torch.randn(4, 3, 3, dtype=torch.float64)
    clf = _classifier([0.0] * 4, -1.25)
    assert seen_score(fmap, clf).item() == -1.25
    assert pseudo_score(fmap, clf).item() == -1.25


def test_seen_and_pseudo_share_machinery(rng):
    fmap = torch.from_numpy(rng.normal(size=(4, 5, 5)))
    w = rng.normal(size=4).tolist()
    assert seen_score(fmap, _classifier(w, 0.2)).item() == pseudo_score(fmap, _classifier(w, 0.2)).item()


def test_mil_score_composition_oracle(rng):
    fmap = rng.normal(size=(4, 6, 6))
    w, b = rng.normal(size=4), 0.3
    oracle = sort_oracle(np.einsum("c,chw->hw", w, fmap) + b, 0.1)
    assert mil_score(torch.from_numpy(fmap), _classifier(w.tolist(), b)).item() == pytest.approx(oracle, abs=1e-12)


# --- reference map and residuals -------------------------------------------

def test_reference_map_single_and_repeated(tiny64, rng):
    x = torch.from_numpy(rng.random((3, 16, 16)))
    with torch.no_grad():
        fx = extract_features(x, tiny64)
    assert torch.equal(compute_reference_map([x], tiny64), fx)
    assert torch.allclose(compute_reference_map([x, x, x, x], tiny64), fx, atol=1e-15, rtol=0)


def test_reference_map_hand_average():
    class Fixed(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.p = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))

        def forward(self, x):
            return x[:, :2]

    a = torch.tensor([[[1.0, 2.0]], [[3.0, 4.0]]], dtype=torch.float64)
    b = torch.tensor([[[5.0, -2.0]], [[0.0, 8.0]]], dtype=torch.float64)

    def pad(t):
        return torch.cat([t, torch.zeros(1, 1, 2, dtype=torch.float64)])

    m = compute_reference_map([pad(a), pad(b)], Fixed())
    assert m.tolist() == [[[3.0, 0.0]], [[1.5, 6.0]]]


def test_reference_map_permutation_exact(tiny64, rng):
    refs = [torch.from_numpy(rng.random((3, 16, 16))) for _ in range(5)]
    base = compute_reference_map(refs, tiny64)
    for perm in itertools.islice(itertools.permutations(range(5)), 0, 120, 7):
        assert torch.equal(compute_reference_map([refs[i] for i in perm], tiny64), base)


def test_reference_map_errors(tiny64):
    with pytest.raises(DataError):
        compute_reference_map([], tiny64)
    with pytest.raises(InputShapeError):
        compute_reference_map([np.zeros((3, 16, 16)), np.zeros((3, 8, 8))], tiny64)


def test_residual_map_cases(rng):
    a = torch.from_numpy(rng.normal(size=(3, 4, 4)))
    b = torch.from_numpy(rng.normal(size=(3, 4, 4)))
    assert torch.all(residual_map(a, a) == 0)
    assert torch.equal(residual_map(torch.zeros_like(a), a), -a)
    loop = np.empty((3, 4, 4))
    an, bn = a.numpy(), b.numpy()
    for c in range(3):
        for i in range(4):
            for j in range(4):
                loop[c, i, j] = an[c, i, j] - bn[c, i, j]
    assert np.array_equal(residual_map(a, b).numpy(), loop)
    assert torch.equal(residual_map(a, b), -residual_map(b, a))
    with pytest.raises(InputShapeError):
        residual_map(a, torch.zeros(3, 4, 5, dtype=a.dtype))


def test_residual_score_cases(rng):
    m_r = torch.from_numpy(rng.normal(size=(4, 3, 3)))
    refset = ReferenceSet(np.zeros((1, 3, 24, 24)), {(3, 3): m_r})
    clf = _classifier(rng.normal(size=4).tolist(), 0.0)
    with torch.no_grad():
        assert residual_score(m_r.clone(), refset, clf).item() == 0.0
        assert residual_score(torch.from_numpy(rng.normal(size=(4, 3, 3))), refset,
                              _classifier([0.0] * 4, 0.8)).item() == 0.8
        m_x = rng.normal(size=(4, 3, 3))
        w, b = rng.normal(size=4), -0.2
        oracle = sort_oracle(np.einsum("c,chw->hw", w, m_r.numpy() - m_x) + b, 0.1)
        got = residual_score(torch.from_numpy(m_x), refset, _classifier(w.tolist(), b)).item()
    assert got == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(StateError):
        residual_score(m_r, None, clf)


def test_reference_set_is_write_once(rng):
    imgs = rng.random((2, 3, 8, 8))
    refset = ReferenceSet(imgs, {(1, 1): torch.zeros(2, 1, 1)})
    with pytest.raises(ValueError):
        refset.images[0, 0, 0, 0] = 1.0
    refset.maps[(1, 1)].fill_(5.0)
    assert torch.all(refset.reference_map((1, 1)) == 0)


# --- normality head ---------------------------------------------------------

def test_global_pool_of_constant_map():
    v = torch.tensor([0.3, -1.1, 2.0], dtype=torch.float64)
    fmap = v.view(3, 1, 1).expand(3, 4, 5).unsqueeze(0)
    assert torch.equal(global_pool(fmap)[0], v)


def test_global_pool_loop_oracle(rng):
    fmap = rng.normal(size=(5, 3, 7))
    loop = [sum(fmap[c, i, j] for i in range(3) for j in range(7)) / 21 for c in range(5)]
    assert np.allclose(global_pool(torch.from_numpy(fmap)[None])[0].numpy(), loop, atol=1e-12, rtol=0)


def test_normality_zero_weights_bias():
    head = NormalityHead(8).double()
    with torch.no_grad():
        head.fc2.weight.zero_()
        head.fc2.bias.fill_(0.42)
    assert normality_score(torch.randn(8, 2, 2, dtype=torch.float64), head).item() == 0.42
    assert head.fc1.out_features == 4
    with pytest.raises(InputShapeError):
        normality_score(torch.zeros(6, 2, 2), head)


# --- composite ---------------------------------------------------------------

def test_composite_examples():
    full = AblationMask()
    assert composite_score([{"seen": 0.2, "pseudo": 0.3, "residual": 0.1, "normal": 0.4}], full) == pytest.approx(0.2)
    one = AblationMask.preset("DRA1A")
    assert composite_score([{"seen": 0.4}, {"seen": 0.6}], one) == 0.5
    assert composite_score([{"seen": 0.7}], one) == 0.7


def test_composite_additivity(rng):
    for _ in range(100):
        s = dict(zip(["seen", "pseudo", "residual", "normal"], rng.normal(size=4)))
        without = composite_score([{k: s[k] for k in ("seen", "pseudo", "normal")}], AblationMask.preset("DRA3An"))
        with_r = composite_score([s], AblationMask.preset("DRA"))
        assert with_r - without == pytest.approx(s["residual"], abs=1e-12)


def test_composite_consistency_errors():
    with pytest.raises(ConsistencyError):
        composite_score([{"seen": 0.1, "pseudo": 0.2}], AblationMask.preset("DRA1A"))
    with pytest.raises(ConsistencyError):
        composite_score([{"seen": 0.1}], AblationMask.preset("DRA2A"))
    with pytest.raises(DataError):
        composite_score([], AblationMask())


def test_presets():
    assert AblationMask.preset("DRA1A").enabled == ("seen",)
    assert AblationMask.preset("DRA3Ar").enabled == ("seen", "pseudo", "residual")
    assert AblationMask.preset("DRA3An").enabled == ("seen", "pseudo", "normal")
    assert AblationMask.preset("DRA").name == "DRA"
    with pytest.raises(ValueError):
        AblationMask(seen=False, pseudo=False, residual=False, normal=True)
