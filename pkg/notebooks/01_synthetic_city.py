# %% [markdown]
# # A synthetic city
#
# The generator lays out a grid of square tracts and fills each with `K`
# time-lapsed scene pairs.  Gentrifying tracts get a larger share of pairs with
# a structural edit (a new building, a hoarded lot, a refaced facade).  Every
# pair also carries nuisance differences: lighting drift, vehicles and, in
# some tracts, storefront refits that are not structural change.

# %%
import numpy as np
import matplotlib.pyplot as plt

from gentrimil.ingest import Label
from gentrimil.synthcity import SynthConfig, gen_city, render_scene_pair

config = SynthConfig(seed=0, n_tracts=16, K=50, n_step1=200)
city = gen_city(config)
print(len(city.containers), "bags,", len(city.step1_pairs), "Step-1 pairs,", len(city.planted), "planted changes")

# %% [markdown]
# Planted change counts per bag follow `round(rho * K)`.

# %%
planted = {}
for row in city.planted:
    planted[row["tract_id"]] = planted.get(row["tract_id"], 0) + 1
for c in city.containers[:6]:
    print(c.tract_id, c.label.value, planted.get(c.tract_id, 0), "of", len(c.pairs))

# %% [markdown]
# One changed and one unchanged scene, earlier above later.

# %%
fig, axes = plt.subplots(2, 2, figsize=(5, 5))
for col, change in enumerate((True, False)):
    scene = render_scene_pair([0, 99, col], change, config)
    axes[0, col].imshow(scene.earlier)
    axes[1, col].imshow(scene.later)
    axes[0, col].set_title(scene.edit["kind"] if scene.edit else "no edit")
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()

# %% [markdown]
# Gentrifying tracts and the pairs whose images differ most in pixels are not
# the same thing: nuisance edits keep raw pixel distance a poor signal.

# %%
def pixel_gap(pair):
    e = city.loader(pair.earlier.pixels_ref).astype(float)
    l = city.loader(pair.later.pixels_ref).astype(float)
    return np.abs(e - l).mean()

for lab in (Label.GENTRIFYING, Label.NON_GENTRIFYING):
    gaps = [pixel_gap(p) for c in city.containers if c.label is lab for p in c.pairs]
    print(f"{lab.value:16s} mean pixel gap {np.mean(gaps):.2f}")
