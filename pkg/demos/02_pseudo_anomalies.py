"""What the pseudo-anomaly generators produce.

Writes ``pseudo_anomalies.png`` (a grid of normals, CutMix pastes, scars and
their masks) into the working directory.
"""

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dra.protocols import SynthSpec, synth_generate
from dra.pseudogen import cutmix, cutpaste_scar

rng = np.random.default_rng(3)
cat = synth_generate(SynthSpec(n_normal_train=4, n_normal_test=0, n_per_class=1, size=64, seed=1))
normals = [cat.load(i) for i in cat.normal_train]

# %% Each generator returns the new image and the mask of pixels it touched.
# Pixels outside the mask are bit-for-bit the normal image.
rows = []
for x in normals:
    cm, cm_mask = cutmix(x, rng, return_mask=True)
    sc, sc_mask = cutpaste_scar(x, rng, return_mask=True)
    assert np.array_equal(cm[:, ~cm_mask], x[:, ~cm_mask])
    rows.append([x, cm, cm_mask, sc, sc_mask])

# %%
titles = ["normal", "CutMix", "CutMix mask", "scar", "scar mask"]
fig, axes = plt.subplots(len(rows), 5, figsize=(8, 1.7 * len(rows)))
for r, row in enumerate(rows):
    for c, img in enumerate(row):
        ax = axes[r, c]
        ax.imshow(img if img.ndim == 2 else img.transpose(1, 2, 0), cmap="gray", vmin=0, vmax=1)
        ax.set_xticks([]), ax.set_yticks([])
        if r == 0:
            ax.set_title(titles[c], fontsize=8)
fig.tight_layout()
fig.savefig("pseudo_anomalies.png", dpi=110)
print("wrote pseudo_anomalies.png")
