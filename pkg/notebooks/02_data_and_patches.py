# %% [markdown]
# # Synthetic activity-like series, splits and patches

# %%
import numpy as np

from tsssl import augment as A
from tsssl import data as D

ds = D.synth_generate(n_per_class=20, n_classes=6, c=3, d=200, noise_std=0.1, seed=0)
print(ds.values.shape, ds.class_counts())

# %% [markdown]
# Stratified split into pretraining / validation / test parts, then z-score
# normalisation with statistics from the pretraining part only.

# %%
pre, valid, test = D.stratified_split(ds, D.SplitSpec(0.58, 0.14, 0.28), seed=0)
stats = D.compute_stats(pre)
pre, valid, test = (D.zscore_normalize(s, stats) for s in (pre, valid, test))
print([len(s) for s in (pre, valid, test)], pre.class_counts())

# %% [markdown]
# Label-ratio subsets are nested: the 10% subset contains the 1% subset.

# %%
small = D.label_ratio_subset(pre, 0.01, seed=41)
larger = D.label_ratio_subset(pre, 0.1, seed=41)
print(len(small), len(larger), small.class_counts())

# %% [markdown]
# A (3, 200) series cut into length-10 patches gives 20 tokens; masking 75%
# leaves 5 visible.

# %%
grid = A.patchify(pre.samples[0], 10)
plan = A.sample_mask(grid.n_patches, 0.75, seed=1)
print(grid.n_patches, "patches,", len(plan.visible_idx), "visible:", plan.visible_idx)
back = A.unpatchify(grid)
print("round trip exact:", np.array_equal(back.values, pre.samples[0].values))
