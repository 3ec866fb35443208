# %% [markdown]
# # Fine-tuning and the six reported metrics

# %%
import numpy as np

from tsssl import data as D
from tsssl import evaluate as E
from tsssl import generative as G
from tsssl import nn

ds = D.synth_generate(60, noise_std=0.5, seed=0)
pre, valid, test = D.stratified_split(ds, D.SplitSpec(), seed=0)
stats = D.compute_stats(pre)
pre, valid, test = (D.zscore_normalize(s, stats) for s in (pre, valid, test))

# %%
mae = G.pretrain_generative(pre, G.MaeConfig(epochs=10, batch_size=64), seed=41)
labeled = D.label_ratio_subset(pre, 0.1, seed=41)
cfg = E.FinetuneConfig(epochs=30, batch_size=64)

with_pre = E.finetune(mae.encoder, labeled, valid, cfg, seed=41)
scratch = E.finetune(nn.init_params(nn.ArchConfig().encoder(3), 41), labeled, valid, cfg, seed=41)
for name, r in (("pretrained", with_pre), ("random init", scratch)):
    rep = E.evaluate(r.encoder, r.classifier, test)
    print(f"{name:>12}:", {k: round(v, 4) for k, v in rep.means().items()})

# %% [markdown]
# Small hand-checkable cases for the metrics.

# %%
s = np.array([0.1, 0.4, 0.35, 0.8])
print("AUROC", E.auroc_ovr(np.stack([1 - s, s], 1), [0, 0, 1, 1], 2))
print("macro-F1", E.macro_f1([0, 0, 1, 1, 2], [0, 1, 1, 1, 2], 3))
agg = E.aggregate_seeds([E.MetricsReport(*[0.8] * 6), E.MetricsReport(*[0.9] * 6)])
print("F1 mean/std", agg.f1, agg.std["f1"])
