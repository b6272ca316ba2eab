"""Post-hoc reading of trained attention: weight curves, extreme pairs,
label/prediction discrepancy classes and map export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geodata import TractPolygon
from .ingest import Label
from .mil import AttentionParams, bag_weights

KLASS_STYLE = {
    "agree_gentrifying": {"fill": "#d7301f", "fill-opacity": 0.6},
    "agree_non_gentrifying": {"fill": "#2b8cbe", "fill-opacity": 0.6},
    "discrepancy": {"fill": "#fdae61", "fill-opacity": 0.8},
    "miss": {"fill": "#969696", "fill-opacity": 0.6},
}


def sorted_weight_curve(container, params: AttentionParams, cache, mode: str = "full") -> np.ndarray:
    """Attention weights of the bag in descending order."""
    a = bag_weights(cache.bag(container), params, mode)
    return np.sort(a)[::-1]


def top_mass(curve: Sequence[float], k: int = 10) -> float:
    return float(np.sum(np.sort(np.asarray(curve))[::-1][:k]))


@dataclass
class ExtremePairs:
    top: list[dict]
    bottom: list[dict]
    flagged: bool = False


def extreme_pairs(container, params: AttentionParams, cache, k: int = 20, mode: str = "full") -> ExtremePairs:
    """Highest- and lowest-weighted pairs of a bag with their image refs.

    Pairs are ranked by weight with ties broken by pair_id.  When the bag has
    fewer than ``2k`` pairs, both lists hold the whole bag and ``flagged`` is set.
    """
    a = bag_weights(cache.bag(container), params, mode)
    rows = [{"pair_id": p.pair_id, "weight": float(w), "earlier": p.earlier.pixels_ref,
             "later": p.later.pixels_ref} for p, w in zip(container.pairs, a)]
    desc = sorted(rows, key=lambda r: (-r["weight"], r["pair_id"]))
    asc = sorted(rows, key=lambda r: (r["weight"], r["pair_id"]))
    if len(rows) < 2 * k:
        return ExtremePairs(desc, asc, flagged=True)
    return ExtremePairs(desc[:k], asc[:k])


@dataclass(frozen=True)
class DiscrepancyClass:
    tract_id: str
    label: str
    prediction: str
    klass: str


def _as_label(v) -> str:
    if isinstance(v, (int, np.integer, bool)):
        return Label.GENTRIFYING.value if int(v) == 1 else Label.NON_GENTRIFYING.value
    lab = Label(v)
    if lab is Label.NON_GENTRIFIABLE:
        raise ValueError("non-gentrifiable tracts have no discrepancy class")
    return lab.value


def discrepancy_classes(labels: Mapping[str, object], predictions: Mapping[str, object]) -> list[DiscrepancyClass]:
    only_l = sorted(set(labels) - set(predictions))
    only_p = sorted(set(predictions) - set(labels))
    if only_l or only_p:
        raise ValueError(f"tract keys differ: missing predictions {only_l}, missing labels {only_p}")
    out = []
    g = Label.GENTRIFYING.value
    for tid in sorted(labels):
        lab, pred = _as_label(labels[tid]), _as_label(predictions[tid])
        if lab == pred:
            klass = "agree_gentrifying" if lab == g else "agree_non_gentrifying"
        elif pred == g:
            klass = "discrepancy"
        else:
            klass = "miss"
        out.append(DiscrepancyClass(tid, lab, pred, klass))
    return out


def export_map(tracts: Sequence[TractPolygon], classes: Sequence[DiscrepancyClass]) -> dict:
    """GeoJSON FeatureCollection with one styled feature per classified tract."""
    by_id = {t.tract_id: t for t in tracts}
    missing = [c.tract_id for c in classes if c.tract_id not in by_id]
    if missing:
        raise ValueError(f"no polygon for tracts {missing}")
    features = []
    for c in classes:
        ring = [pt.to_json() for pt in by_id[c.tract_id].ring]
        features.append({
            "type": "Feature",
            "properties": {"tract_id": c.tract_id, "label": c.label, "prediction": c.prediction,
                           "klass": c.klass, **KLASS_STYLE[c.klass], "stroke": "#333333"},
            "geometry": {"type": "Polygon", "coordinates": [ring]},
        })
    return {"type": "FeatureCollection", "features": features}


def curve_report(containers, params: AttentionParams, cache, csv_path: str | Path,
                 plot_path: str | Path | None = None, mode: str = "full", k: int = 10) -> list[dict]:
    """Write per-bag sorted weight curves as CSV (tract_id, rank, weight, label).

    Returns one summary row per bag with its top-``k`` weight mass.  A line
    chart grouped by label is rendered when ``plot_path`` is given (.png or .svg).
    """
    ordered = sorted(containers, key=lambda c: c.tract_id)
    labels = {c.label for c in ordered}
    if not {Label.GENTRIFYING, Label.NON_GENTRIFYING} <= labels:
        raise ValueError("curve report needs at least one bag of each class")
    curves, summary = {}, []
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tract_id", "rank", "weight", "label"])
        for c in ordered:
            curve = sorted_weight_curve(c, params, cache, mode)
            curves[c.tract_id] = curve
            for rank, wt in enumerate(curve, start=1):
                w.writerow([c.tract_id, rank, repr(float(wt)), c.label.value])
            summary.append({"tract_id": c.tract_id, "label": c.label.value,
                            f"top{k}_mass": top_mass(curve, k)})
    if plot_path is not None:
        _plot_curves(ordered, curves, plot_path)
    return summary


def mean_top_mass(summary: Sequence[dict], label: str, k: int = 10) -> float:
    vals = [r[f"top{k}_mass"] for r in summary if r["label"] == label]
    return float(np.mean(vals))


def _plot_curves(containers, curves, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {Label.GENTRIFYING: "tab:red", Label.NON_GENTRIFYING: "tab:blue"}
    seen = set()
    for c in containers:
        curve = curves[c.tract_id]
        ax.plot(np.arange(1, len(curve) + 1), curve, color=colors[c.label], alpha=0.4, lw=0.8,
                label=None if c.label in seen else c.label.value.replace("_", "-"))
        seen.add(c.label)
    ax.set_xlabel("pair rank (descending weight)")
    ax.set_ylabel("attention weight")
    ax.legend()
    fig.tight_layout()
    meta = {"Date": None} if str(path).endswith(".svg") else {}
    fig.savefig(path, metadata=meta)
    plt.close(fig)
