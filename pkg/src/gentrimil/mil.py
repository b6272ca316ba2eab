"""Gated-attention multiple-instance pooling over neighborhood bags.

For a bag ``H`` (K x M) of pair embeddings::

    s_i = w . (tanh(V h_i) * sigm(U h_i))
    a   = softmax(s)
    n   = sum_i a_i h_i
    P   = sigm(beta . n)

Training modes: ``full`` learns V, U, w and beta on cached embeddings;
``mean_pool`` fixes a_i = 1/K and learns beta only; ``pretrained_mean_pool``
is mean pooling over embeddings from an untrained reference backbone;
``e2e`` back-propagates the bag loss through attention into the backbone.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import store
from .encoder import EncoderParams, bce_loss, classify_pair, init_encoder, pair_embedding
from .evaluation import split_containers
from .images import to_unit
from .nn import Adam, max_relative_error, numeric_gradients, sigmoid, softmax

log = logging.getLogger(__name__)

MODES = ("full", "mean_pool", "pretrained_mean_pool", "e2e")
ATTENTION_KEYS = ("V", "U", "w")


@dataclass
class AttentionParams:
    V: np.ndarray
    U: np.ndarray
    w: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for k in ("V", "U", "w", "beta"):
            setattr(self, k, np.asarray(getattr(self, k), dtype=np.float64))
        W, M = self.V.shape
        if self.U.shape != (W, M) or self.w.shape != (W,) or self.beta.shape != (M,):
            raise ValueError("inconsistent attention parameter shapes")
        if not all(np.isfinite(a).all() for a in self.arrays().values()):
            raise ValueError("attention parameters must be finite")

    @property
    def W(self) -> int:
        return self.V.shape[0]

    @property
    def M(self) -> int:
        return self.V.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"V": self.V, "U": self.U, "w": self.w, "beta": self.beta}

    def save(self, path: str | Path, meta: dict | None = None) -> str:
        return store.save(path, self.arrays(), {"kind": "attention", "W": self.W, "M": self.M, **(meta or {})})

    @classmethod
    def load(cls, path: str | Path) -> tuple["AttentionParams", dict]:
        arrays, meta = store.load(path)
        return cls(arrays["V"], arrays["U"], arrays["w"], arrays["beta"]), meta


def init_attention(M: int, W: int = 128, seed: int = 0) -> AttentionParams:
    """V, U uniform in +-sqrt(6/(W+M)); w and beta start at zero."""
    rng = np.random.default_rng(seed)
    lim = np.sqrt(6.0 / (W + M))
    return AttentionParams(rng.uniform(-lim, lim, (W, M)), rng.uniform(-lim, lim, (W, M)),
                           np.zeros(W), np.zeros(M))


# --- forward ----------------------------------------------------------------

def gated_scores(hs: np.ndarray, params: AttentionParams) -> np.ndarray:
    H = np.asarray(hs, dtype=np.float64)
    return (np.tanh(H @ params.V.T) * sigmoid(H @ params.U.T)) @ params.w


def attention_weights(hs: np.ndarray, params: AttentionParams) -> np.ndarray:
    H = np.asarray(hs, dtype=np.float64)
    if H.ndim != 2 or len(H) < 1:
        raise ValueError("a bag needs at least one instance")
    return softmax(gated_scores(H, params))


def aggregate(hs: np.ndarray, a: np.ndarray) -> np.ndarray:
    H = np.asarray(hs, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if len(H) != len(a):
        raise ValueError(f"{len(H)} instances but {len(a)} weights")
    return a @ H


def neighborhood_score(n: np.ndarray, beta: np.ndarray):
    return sigmoid(np.asarray(n) @ np.asarray(beta))


bag_bce_loss = bce_loss


def bag_weights(hs: np.ndarray, params: AttentionParams, mode: str = "full") -> np.ndarray:
    if mode in ("mean_pool", "pretrained_mean_pool"):
        return np.full(len(hs), 1.0 / len(hs))
    return attention_weights(hs, params)


def bag_probability(hs: np.ndarray, params: AttentionParams, mode: str = "full") -> float:
    return float(neighborhood_score(aggregate(hs, bag_weights(hs, params, mode)), params.beta))


# --- backward ---------------------------------------------------------------

def bag_loss_and_grads(hs: np.ndarray, y: int, params: AttentionParams, mode: str = "full",
                       weight: float = 1.0, need_dH: bool = True):
    """Weighted bag loss, parameter gradients and the gradient w.r.t. ``hs``
    (``None`` unless ``need_dH``)."""
    H = np.asarray(hs, dtype=np.float64)
    pooled = mode in ("mean_pool", "pretrained_mean_pool")
    if pooled:
        a = np.full(len(H), 1.0 / len(H))
    else:
        A = np.tanh(H @ params.V.T)
        G = sigmoid(H @ params.U.T)
        AG = A * G
        a = softmax(AG @ params.w)
    n = a @ H
    P = float(sigmoid(n @ params.beta))
    loss = weight * float(bce_loss(P, y))
    dz = weight * (P - y)
    grads = {"beta": dz * n}
    dn = dz * params.beta
    dH = np.outer(a, dn) if need_dH else None
    if pooled:
        grads.update({k: np.zeros_like(getattr(params, k)) for k in ATTENTION_KEYS})
        return loss, grads, dH
    da = H @ dn
    ds = a * (da - a @ da)
    grads["w"] = AG.T @ ds
    dAG = np.outer(ds, params.w)
    dVpre = dAG * G * (1.0 - A * A)
    dUpre = dAG * A * G * (1.0 - G)
    grads["V"] = dVpre.T @ H
    grads["U"] = dUpre.T @ H
    if need_dH:
        dH += dVpre @ params.V + dUpre @ params.U
    return loss, grads, dH


def batch_loss_and_grads(params: AttentionParams, batch, mode: str = "full"):
    """Mean over ``batch`` of ``(hs, y[, weight])`` items."""
    total = 0.0
    acc = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    for item in batch:
        hs, y = item[0], item[1]
        wt = item[2] if len(item) > 2 else 1.0
        loss, g, _ = bag_loss_and_grads(hs, y, params, mode, wt, need_dH=False)
        total += loss
        for k in acc:
            acc[k] += g[k]
    n = len(batch)
    return total / n, {k: v / n for k, v in acc.items()}


def grad_check(params: AttentionParams, batch, eps: float = 1e-5, mode: str = "full",
               grad_fn: Callable | None = None) -> float:
    """Max relative error between analytic and central-difference gradients
    over every entry of V, U, w and beta."""
    work = copy.deepcopy(params)
    arrays = work.arrays()
    grad_fn = grad_fn or batch_loss_and_grads
    _, analytic = grad_fn(work, batch, mode)
    numeric = numeric_gradients(lambda: batch_loss_and_grads(work, batch, mode)[0], arrays, eps)
    return max_relative_error(analytic, numeric)


# --- training ---------------------------------------------------------------

@dataclass
class MILConfig:
    W: int = 128
    epochs: int = 150
    lr: float = 1e-3
    batch: int = 8
    seed: int = 0
    split: float = 0.7
    class_weighting: bool = True
    # backbone shape used by e2e and by the reference embeddings
    d: int = 64
    depth: int = 4
    base_channels: int = 8
    image_side: int = 64


@dataclass
class MILResult:
    params: AttentionParams
    mode: str
    train_ids: list[str]
    test_ids: list[str]
    encoder: EncoderParams | None = None
    log: list[dict] = field(default_factory=list)


def class_weights(labels: Sequence[int], enabled: bool = True) -> dict[int, float]:
    """Inverse-frequency weights normalised so a balanced set gets weight 1."""
    labels = list(labels)
    if not enabled:
        return {0: 1.0, 1: 1.0}
    n = len(labels)
    return {c: n / (2.0 * labels.count(c)) for c in (0, 1)}


def _e2e_bag(encoder: EncoderParams, container, loader):
    xe = np.stack([to_unit(loader(p.earlier.pixels_ref)) for p in container.pairs])
    xl = np.stack([to_unit(loader(p.later.pixels_ref)) for p in container.pairs])
    k = len(xe)
    out, cache = encoder.backbone.forward(np.concatenate([xe, xl]))
    return pair_embedding(out[:k], out[k:]), cache, k


def _e2e_backbone_grads(encoder, dH, cache, k):
    d = encoder.d
    dhl = dH[:, :d] + dH[:, d:2 * d]
    dhe = -dH[:, :d] + dH[:, 2 * d:]
    return encoder.backbone.backward(np.concatenate([dhe, dhl]), cache)


def train_mil(cache, containers, config: MILConfig, mode: str = "full",
              loader: Callable[[str], np.ndarray] | None = None) -> MILResult:
    """Fit the bag classifier.

    ``cache`` maps pair ids to embeddings (``EmbeddingCache``); for
    ``pretrained_mean_pool`` it should hold reference-backbone embeddings.
    ``e2e`` ignores ``cache`` and needs ``loader`` to read pair images.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    labels = [c.y for c in containers]
    if len(set(labels)) < 2:
        raise ValueError("refusing to train on a single-class container set")
    train, test = split_containers(containers, config.split, config.seed)
    cw = class_weights([c.y for c in train], config.class_weighting)

    encoder = None
    if mode == "e2e":
        if loader is None:
            raise ValueError("e2e mode needs an image loader")
        encoder = init_encoder(config.d, config.depth, config.base_channels, config.image_side, config.seed)
        M = encoder.M
    else:
        M = cache.matrix.shape[1]
    params = init_attention(M, config.W, config.seed)
    flat = params.arrays()
    if mode in ("mean_pool", "pretrained_mean_pool"):
        flat = {"beta": params.beta}
    if encoder is not None:
        flat.update({f"backbone.{k}": v for k, v in encoder.backbone.params.items()})
    opt = Adam(flat, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    bags = {c.tract_id: cache.bag(c) for c in train} if mode != "e2e" else {}

    result = MILResult(params, mode, [c.tract_id for c in train], [c.tract_id for c in test], encoder)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        total, norms = 0.0, {k: 0.0 for k in ATTENTION_KEYS}
        for s in range(0, len(order), config.batch):
            chunk = [train[i] for i in order[s:s + config.batch]]
            acc = {k: np.zeros_like(v) for k, v in flat.items()}
            for c in chunk:
                if mode == "e2e":
                    H, fcache, k = _e2e_bag(encoder, c, loader)
                else:
                    H = bags[c.tract_id]
                loss, g, dH = bag_loss_and_grads(H, c.y, params, mode, cw[c.y], need_dH=mode == "e2e")
                if mode == "e2e":
                    g.update({f"backbone.{k2}": v for k2, v in
                              _e2e_backbone_grads(encoder, dH, fcache, k).items()})
                total += loss
                for key in acc:
                    acc[key] += g[key]
                for key in ATTENTION_KEYS:
                    norms[key] = max(norms[key], float(np.linalg.norm(g[key])))
            opt.step({k: v / len(chunk) for k, v in acc.items()})
        row = {"epoch": epoch, "train_loss": total / len(train),
               **{f"grad_norm_{k}": v for k, v in norms.items()}}
        result.log.append(row)
        if epoch % 25 == 0 or epoch == config.epochs:
            log.info("mil[%s] epoch %d loss %.4f", mode, epoch, row["train_loss"])
    return result


def bag_embeddings(container, cache=None, encoder: EncoderParams | None = None, loader=None) -> np.ndarray:
    if encoder is not None:
        return _e2e_bag(encoder, container, loader)[0]
    return cache.bag(container)


def predict_bags(containers, params: AttentionParams, mode: str = "full", cache=None,
                 encoder: EncoderParams | None = None, loader=None) -> dict[str, float]:
    """Bag probability per tract id."""
    return {c.tract_id: bag_probability(bag_embeddings(c, cache, encoder, loader), params, mode)
            for c in containers}


def classify_bags(probs: dict[str, float], threshold: float = 0.5) -> dict[str, int]:
    return {k: classify_pair(v, threshold) for k, v in probs.items()}


def export_attention_csv(path: str | Path, containers, params: AttentionParams, mode: str = "full",
                         cache=None, encoder=None, loader=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tract_id", "pair_id", "a_i"])
        for c in sorted(containers, key=lambda c: c.tract_id):
            a = bag_weights(bag_embeddings(c, cache, encoder, loader), params, mode)
            for pid, ai in zip(c.pair_ids, a):
                w.writerow([c.tract_id, pid, repr(float(ai))])
