"""Scoring building blocks on hand-made feature maps.

Run with ``python demos/01_scoring_blocks.py``. Nothing is trained here; the
point is to see what each head computes from a feature map.
"""

# %%
import numpy as np
import torch

from dra.featurenet import BackboneConfig, build_backbone, extract_features
from dra.heads import (AblationMask, PatchClassifier, ReferenceSet, composite_score, compute_reference_map,
                       patch_scores, residual_score, topk_mil_pool)

rng = np.random.default_rng(0)

# %% Top-K pooling keeps the image score sensitive to small defects.
# A 10x10 map of quiet patches with a 2x2 hot spot: the mean barely moves,
# the top-10% mean lands right on the hot spot.
scores = torch.from_numpy(rng.normal(0, 0.1, size=(10, 10)))
scores[4:6, 6:8] += 3.0
print("plain mean     ", round(scores.mean().item(), 3))
print("top-10% (K=10) ", round(topk_mil_pool(scores, 0.1).item(), 3))
print("top-4%  (K=4)  ", round(topk_mil_pool(scores, 0.04).item(), 3))

# %% A patch classifier is a 1x1 convolution: one score per spatial cell.
clf = PatchClassifier(4).double()
fmap = torch.from_numpy(rng.normal(size=(4, 6, 6)))
print("patch score grid", tuple(patch_scores(fmap, clf).shape))

# %% The residual head compares against a reference map M_r, the mean
# feature map of a few normal images. Identical features give a zero residual,
# so with a zero-bias classifier the score is exactly 0.
net = build_backbone(BackboneConfig("tiny", channels=4), seed=0).double()
refs = rng.random((5, 3, 32, 32))
m_r = compute_reference_map(refs, net)
refset = ReferenceSet(refs, {tuple(m_r.shape[-2:]): m_r})
with torch.no_grad():
    clf.conv.bias.zero_()
    print("residual score at M_r:", residual_score(m_r.clone(), refset, clf).item())
    odd = refs[0].copy()
    odd[:, 8:16, 8:16] = 1.0
    m_x = extract_features(torch.from_numpy(odd), net)
    print("residual score of an altered image:", round(residual_score(m_x, refset, clf).item(), 4))

# %% The composite adds every abnormality score and subtracts the normality
# score, averaged over pyramid scales.
per_scale = [{"seen": 0.9, "pseudo": 0.4, "residual": 0.3, "normal": 0.2},
             {"seen": 0.7, "pseudo": 0.2, "residual": 0.1, "normal": 0.4}]
print("composite, all heads:", round(composite_score(per_scale, AblationMask()), 4))
seen_only = [{"seen": s["seen"]} for s in per_scale]
print("composite, seen head only:", composite_score(seen_only, AblationMask.preset("DRA1A")))
