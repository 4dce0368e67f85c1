"""
Synthetic corpus and a linear victim
====================================

Build a power-law multilabel corpus, train the TF-IDF victim with the plain
and the PW-cb loss, and compare recall@5 on rare labels.
"""

# %%
# A corpus where a few labels are everywhere and most are rare.
import numpy as np

from advxmtc.dataset import GenConfig, generate_powerlaw_dataset, label_frequencies, rank_frequency_slope, train_test_split

cfg = GenConfig(n_docs=2000, n_labels=200)
corpus = generate_powerlaw_dataset(cfg, seed=0)
train_ds, test_ds = train_test_split(corpus, cfg.test_fraction, seed=0)

freqs = label_frequencies(train_ds)
print("documents:", len(train_ds), "train /", len(test_ds), "test")
print("most frequent label count:", freqs.max(), " median:", int(np.median(freqs)))
print("rank-frequency slope: %.2f" % rank_frequency_slope(freqs))

# %%
# Two victims on the same features: the unweighted loss and the
# propensity-weighted, class-balanced one.
from advxmtc.victim import LossSpec, TrainOptions, recall_at_k, train

models = {mode: train(train_ds, LossSpec("bce", mode), TrainOptions(epochs=30, seed=0))
          for mode in ("plain", "PW-cb")}

# %%
# Rare labels are where reweighting should matter.
rare = (freqs > 0) & (freqs <= np.quantile(freqs[freqs > 0], 0.3))
for mode, model in models.items():
    r = recall_at_k(model, test_ds, k=5)
    print(f"{mode:6s} recall@5  all labels {np.nanmean(r):.3f}   rare labels {np.nanmean(r[rare]):.3f}")

# %%
# Models persist to a compact binary file and load back bit for bit.
import tempfile
from pathlib import Path

from advxmtc.victim import load_model, save_model

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "plain.bin"
    save_model(models["plain"], path)
    again = load_model(path)
    print("round trip identical:", np.array_equal(again.weights, models["plain"].weights))
