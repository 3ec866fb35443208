# %% [markdown]
# # Contrastive pretraining with jittered views

# %%
import math

import numpy as np

from tsssl import contrastive as C
from tsssl import data as D
from tsssl.autodiff import Tensor

# %% [markdown]
# Two copies of one embedding pair: every similarity is 1, so each anchor
# picks its positive out of three equally likely candidates.

# %%
e = np.ones((2, 4))
print(C.nt_xent_loss(C.ContrastiveBatch(Tensor(e), Tensor(e)), 0.5).item(), math.log(3))

# %%
ds = D.synth_generate(30, noise_std=0.5, seed=0)
ds = D.zscore_normalize(ds, D.compute_stats(ds))
cfg = C.ContrastiveConfig(epochs=8, batch_size=64)
res = C.pretrain_contrastive(ds, cfg, seed=41)
print("epoch losses", np.round(res.loss_history, 4))
print("kept epoch", res.best_epoch, "in", round(res.seconds, 1), "s")

# %% [markdown]
# Only the encoder part is handed on to fine-tuning; the projection head is
# dropped.

# %%
print(sorted({k.split(".")[1] for k in res.encoder}))
