"""Splitting and classification metrics."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """Balanced accuracy needs both classes among the true labels."""


def split_indices(labels: Sequence[int], ratio: float = 0.7, seed: int = 0,
                  stratify: bool = True) -> tuple[list[int], list[int]]:
    """Seeded train/test index split, stratified by label.

    Per-class train counts are floored, then the slots still needed to reach
    ``round(ratio * n)`` go to the classes with the largest fractional
    remainders (ties to the smaller label).
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    labels = list(labels)
    n = len(labels)
    target = math.floor(ratio * n + 0.5)
    rng = np.random.default_rng(seed)
    classes = sorted(set(labels))
    if stratify and any(labels.count(c) < 2 for c in classes):
        warnings.warn("a class has fewer than 2 members; falling back to an unstratified split",
                      stacklevel=2)
        stratify = False
    if not stratify:
        order = [int(i) for i in rng.permutation(n)]
        return sorted(order[:target]), sorted(order[target:])
    members = {c: [i for i, y in enumerate(labels) if y == c] for c in classes}
    shuffled = {c: [members[c][int(j)] for j in rng.permutation(len(members[c]))] for c in classes}
    exact = {c: ratio * len(members[c]) for c in classes}
    quota = {c: math.floor(exact[c]) for c in classes}
    spare = target - sum(quota.values())
    for c in sorted(classes, key=lambda c: (-(exact[c] - quota[c]), c))[:max(spare, 0)]:
        quota[c] += 1
    train, test = [], []
    for c in classes:
        train += shuffled[c][:quota[c]]
        test += shuffled[c][quota[c]:]
    return sorted(train), sorted(test)


def split_containers(containers, ratio: float = 0.7, seed: int = 0):
    """Stratified split of gentrifiable containers, in tract_id order."""
    ordered = sorted(containers, key=lambda c: c.tract_id)
    tr, te = split_indices([c.y for c in ordered], ratio, seed)
    return [ordered[i] for i in tr], [ordered[i] for i in te]


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    balanced_accuracy: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(y_true: Sequence[int], y_pred: Sequence[int]) -> Metrics:
    yt = np.asarray(y_true, dtype=int)
    yp = np.asarray(y_pred, dtype=int)
    if yt.shape != yp.shape:
        raise ValueError(f"length mismatch: {yt.shape} vs {yp.shape}")
    if len(set(yt.tolist())) < 2:
        raise UndefinedMetricError("balanced accuracy is undefined when y_true has a single class")
    tp = int(np.sum((yt == 1) & (yp == 1)))
    fn = int(np.sum((yt == 1) & (yp == 0)))
    tn = int(np.sum((yt == 0) & (yp == 0)))
    fp = int(np.sum((yt == 0) & (yp == 1)))
    tpr = tp / (tp + fn)
    tnr = tn / (tn + fp)
    return Metrics((tp + tn) / len(yt), (tpr + tnr) / 2, tpr, tp, fp, tn, fn)


MODEL_NAMES = {
    "full": "Full model",
    "mean_pool": "No attention",
    "pretrained_mean_pool": "Pre-trained & no attention",
    "e2e": "E2E",
}


def format_table(rows: Sequence[tuple[str, str, Metrics]]) -> str:
    """Plain-text results table with columns Eval City, Model, Acc., Balanced Acc."""
    head = ("Eval City", "Model", "Acc.", "Balanced Acc.")
    body = [(city, MODEL_NAMES.get(model, model), f"{m.accuracy:.2f}", f"{m.balanced_accuracy:.2f}")
            for city, model, m in rows]
    widths = [max(len(r[i]) for r in [head, *body]) for i in range(4)]
    fmt = " | ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*r) for r in body]
    return "\n".join(lines)


def metrics_json(rows: Sequence[tuple[str, str, Metrics]]) -> str:
    return json.dumps([{"eval_city": city, "model": model, **m.to_dict()} for city, model, m in rows],
                      indent=2, sort_keys=True) + "\n"
