# %% [markdown]
# # Reading the attention
#
# After Step 2 the attention weights say which pairs drove a bag's score.
# Gentrifying bags concentrate their weight on a few pairs, so their sorted
# weight curve drops off faster.  This notebook reads an existing work
# directory; build one first with
#
#     gentrimil synth && gentrimil train-step1 && gentrimil embed
#     gentrimil train-step2 && gentrimil eval
#
# or point `WORK` at any directory produced that way.

# %%
import json
import os
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

from gentrimil.analysis import discrepancy_classes, export_map, extreme_pairs, sorted_weight_curve, top_mass
from gentrimil.encoder import EmbeddingCache
from gentrimil.ingest import NeighborhoodContainer, gentrifiable, read_jsonl
from gentrimil.mil import AttentionParams

WORK = Path(os.environ.get("GENTRIMIL_WORK", "work"))
containers = gentrifiable(NeighborhoodContainer.from_dict(r) for r in read_jsonl(WORK / "data/containers.jsonl"))
cache = EmbeddingCache.load(WORK / "embed/embeddings.bin")
params, meta = AttentionParams.load(WORK / "step2/attention_full.bin")

# %% [markdown]
# ## Sorted weight curves

# %%
fig, ax = plt.subplots(figsize=(6, 4))
masses = {}
for c in containers:
    curve = sorted_weight_curve(c, params, cache)
    masses.setdefault(c.label.value, []).append(top_mass(curve, 10))
    ax.plot(curve, color="tab:red" if c.y else "tab:blue", alpha=0.3, lw=0.8)
ax.set_xlabel("pair rank")
ax.set_ylabel("attention weight")
for lab, vals in masses.items():
    print(f"{lab:16s} mean top-10 mass {np.mean(vals):.3f}")

# %% [markdown]
# ## The pairs a bag leans on

# %%
bag = max(containers, key=lambda c: top_mass(sorted_weight_curve(c, params, cache), 10))
ex = extreme_pairs(bag, params, cache, k=5)
print(bag.tract_id, bag.label.value)
for row in ex.top:
    print(f"  {row['weight']:.3f}  {row['pair_id']}")

# %% [markdown]
# ## Discrepancy map
#
# Tracts labelled non-gentrifying but predicted gentrifying are candidates
# for early-stage change.

# %%
preds = json.loads((WORK / "eval/predictions_full.json").read_text())["predictions"]
classes = discrepancy_classes({c.tract_id: c.label for c in containers},
                              {c.tract_id: int(preds[c.tract_id]) for c in containers})
fc = export_map([c.tract for c in containers], classes)
print({k: sum(c.klass == k for c in classes) for k in sorted({c.klass for c in classes})})
