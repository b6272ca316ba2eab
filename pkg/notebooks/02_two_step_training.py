# %% [markdown]
# # Two-step training
#
# Step 1 fits a Siamese change detector on weakly labelled pairs.  Step 2
# freezes it, embeds every pair of every bag and learns gated attention over
# the bag.  This notebook runs a reduced city so it finishes in about a
# minute; `gentrimil train-step1` and `gentrimil train-step2` run the full
# default scale.

# %%
import numpy as np

from gentrimil.encoder import Step1Config, embed_dataset, init_encoder, train_change_detector
from gentrimil.evaluation import compute_metrics, format_table
from gentrimil.mil import MILConfig, classify_bags, predict_bags, train_mil
from gentrimil.synthcity import SynthConfig, gen_city

city = gen_city(SynthConfig(seed=0, n_tracts=24, K=50, n_step1=1000, image_side=64))
enc_shape = dict(d=32, depth=4, base_channels=8, image_side=64)

# %% [markdown]
# ## Step 1

# %%
step1 = train_change_detector(city.step1_pairs, Step1Config(**enc_shape, epochs=30), city.loader)
print(f"held-out pair accuracy {step1.test_accuracy:.3f} (best epoch {step1.best_epoch})")

# %% [markdown]
# ## Step 2
#
# The learned encoder feeds `full` and `mean_pool`.  An untrained encoder of
# the same shape feeds `pretrained_mean_pool`.

# %%
cache = embed_dataset(city.containers, step1.params, city.loader)
reference = embed_dataset(city.containers, init_encoder(**enc_shape, seed=0), city.loader)
mil_config = MILConfig(W=64, epochs=100, **enc_shape)

rows = []
for mode, emb in (("full", cache), ("mean_pool", cache), ("pretrained_mean_pool", reference)):
    result = train_mil(emb, city.containers, mil_config, mode)
    test = [c for c in city.containers if c.tract_id in set(result.test_ids)]
    preds = classify_bags(predict_bags(test, result.params, mode, cache=emb))
    rows.append(("Synthetic", mode, compute_metrics([c.y for c in test], [preds[c.tract_id] for c in test])))
print(format_table(rows))
