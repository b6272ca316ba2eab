"""Siamese change detection on time-lapsed pairs.

Both images of a pair go through one shared backbone.  The pair is
represented by the block vector ``[later - earlier; later; earlier]`` and
scored with a logistic unit.
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
from .evaluation import split_indices
from .images import to_unit
from .nn import Adam, ConvBackbone, backbone_from_config, sigmoid

log = logging.getLogger(__name__)

EPS = 1e-7
THRESHOLD = 0.5


@dataclass
class EncoderParams:
    backbone: object
    alpha: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.shape != (self.M,):
            raise ValueError(f"alpha has shape {self.alpha.shape}, expected ({self.M},)")

    @property
    def d(self) -> int:
        return self.backbone.d

    @property
    def M(self) -> int:
        return 3 * self.backbone.d

    @property
    def L(self) -> int:
        return getattr(self.backbone, "depth", 0)

    def arrays(self) -> dict[str, np.ndarray]:
        return {**{f"backbone.{k}": v for k, v in self.backbone.params.items()}, "alpha": self.alpha}

    def meta(self) -> dict:
        return {"kind": "encoder", "d": self.d, "M": self.M, "L": self.L, "seed": self.seed,
                "backbone": self.backbone.config()}

    def content_hash(self) -> str:
        return store.content_hash(self.arrays(), self.meta())

    def save(self, path: str | Path) -> str:
        return store.save(path, self.arrays(), self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "EncoderParams":
        arrays, meta = store.load(path)
        bb = backbone_from_config(meta["backbone"],
                                  {k[len("backbone."):]: v for k, v in arrays.items() if k.startswith("backbone.")})
        return cls(bb, arrays["alpha"], meta.get("seed", 0))


def init_encoder(d=64, depth=4, base_channels=8, image_side=64, seed=0) -> EncoderParams:
    bb = ConvBackbone(d=d, depth=depth, base_channels=base_channels, image_side=image_side, seed=seed)
    return EncoderParams(bb, np.zeros(3 * d), seed)


# --- forward pieces ----------------------------------------------------------

def encode_batch(imgs: np.ndarray, params: EncoderParams) -> np.ndarray:
    out, _ = params.backbone.forward(to_unit(imgs))
    return out


def encode_image(img: np.ndarray, params: EncoderParams) -> np.ndarray:
    return encode_batch(np.asarray(img)[None], params)[0]


def pair_embedding(h_e: np.ndarray, h_l: np.ndarray) -> np.ndarray:
    """``[h_l - h_e; h_l; h_e]``; works row-wise on 2-D input."""
    h_e = np.asarray(h_e, dtype=np.float64)
    h_l = np.asarray(h_l, dtype=np.float64)
    if h_e.shape != h_l.shape:
        raise ValueError(f"embedding shapes differ: {h_e.shape} vs {h_l.shape}")
    return np.concatenate([h_l - h_e, h_l, h_e], axis=-1)


def change_score(h: np.ndarray, alpha: np.ndarray):
    return sigmoid(np.asarray(h) @ np.asarray(alpha))


def bce_loss(p, y, eps: float = EPS):
    """Cross-entropy, ``-[y log p + (1 - y) log(1 - p)]`` with ``p`` clipped to [eps, 1 - eps]."""
    p = np.clip(p, eps, 1 - eps)
    return -(y * np.log(p) + (1 - y) * np.log1p(-p))


pair_bce_loss = bce_loss


def classify_pair(p, threshold: float = THRESHOLD):
    return (np.asarray(p) >= threshold).astype(int) if np.ndim(p) else int(p >= threshold)


# --- training ----------------------------------------------------------------

def pair_loss_and_grads(params: EncoderParams, xe: np.ndarray, xl: np.ndarray, y: np.ndarray,
                        weights: np.ndarray | None = None):
    """Mean pair loss and gradients for alpha and every backbone parameter."""
    b = len(y)
    out, cache = params.backbone.forward(np.concatenate([to_unit(xe), to_unit(xl)]))
    he, hl = out[:b], out[b:]
    h = pair_embedding(he, hl)
    p = sigmoid(h @ params.alpha)
    w = np.ones(b) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float(np.sum(w * bce_loss(p, y)) / b)
    dz = w * (p - y) / b
    d = params.d
    dh = np.outer(dz, params.alpha)
    dhl = dh[:, :d] + dh[:, d:2 * d]
    dhe = -dh[:, :d] + dh[:, 2 * d:]
    grads = {"alpha": h.T @ dz}
    grads.update({f"backbone.{k}": g for k, g in
                  params.backbone.backward(np.concatenate([dhe, dhl]), cache).items()})
    return loss, grads, p


@dataclass
class Step1Config:
    d: int = 64
    depth: int = 4
    base_channels: int = 8
    image_side: int = 64
    epochs: int = 50
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    split: float = 0.7
    val_fraction: float = 0.15
    patience: int | None = None


@dataclass
class Step1Result:
    params: EncoderParams
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    test_accuracy: float = float("nan")
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)


def write_training_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['train_loss']:.10g}", f"{r['val_acc']:.10g}"])


def _stack(loader, pairs, idx):
    xe = np.stack([loader(pairs[i].earlier.pixels_ref) for i in idx])
    xl = np.stack([loader(pairs[i].later.pixels_ref) for i in idx])
    return xe, xl


def predict_pairs(params: EncoderParams, pairs, loader, batch: int = 128) -> np.ndarray:
    probs = []
    for s in range(0, len(pairs), batch):
        idx = range(s, min(s + batch, len(pairs)))
        xe, xl = _stack(loader, pairs, idx)
        h = pair_embedding(encode_batch(xe, params), encode_batch(xl, params))
        probs.append(change_score(h, params.alpha))
    return np.concatenate(probs) if probs else np.zeros(0)


def train_change_detector(dataset, config: Step1Config, loader: Callable[[str], np.ndarray],
                          params: EncoderParams | None = None) -> Step1Result:
    """Fit the Siamese detector on weakly labeled pairs.

    The data are split 70/30 (stratified, seeded); a validation slice of the
    training part selects the epoch whose parameters are returned.  Accuracy
    on the 30% hold-out is reported in the result.
    """
    pairs = [p for p, _ in dataset]
    y_all = np.array([lab.y for _, lab in dataset], dtype=np.float64)
    if len(set(y_all.tolist())) < 2:
        raise ValueError("refusing to train the change detector on a single-class dataset")
    order = sorted(range(len(pairs)), key=lambda i: pairs[i].pair_id)
    pairs = [pairs[i] for i in order]
    y_all = y_all[order]
    tr, te = split_indices(y_all.astype(int), config.split, config.seed)
    fit_rel, val_rel = split_indices(y_all[tr].astype(int), 1 - config.val_fraction, config.seed + 1)
    fit = [tr[i] for i in fit_rel]
    val = [tr[i] for i in val_rel]

    if params is None:
        params = init_encoder(config.d, config.depth, config.base_channels, config.image_side, config.seed)
    flat = {"alpha": params.alpha, **{f"backbone.{k}": v for k, v in params.backbone.params.items()}}
    opt = Adam(flat, lr=config.lr)
    rng = np.random.default_rng(config.seed)

    val_pairs = [pairs[i] for i in val]
    y_val = y_all[val]
    result = Step1Result(copy.deepcopy(params))
    best_acc, stale = -1.0, 0
    for epoch in range(1, config.epochs + 1):
        perm = [fit[i] for i in rng.permutation(len(fit))]
        total = 0.0
        for s in range(0, len(perm), config.batch):
            idx = perm[s:s + config.batch]
            xe, xl = _stack(loader, pairs, idx)
            loss, grads, _ = pair_loss_and_grads(params, xe, xl, y_all[idx])
            opt.step(grads)
            total += loss * len(idx)
        val_acc = float(np.mean(classify_pair(predict_pairs(params, val_pairs, loader)) == y_val))
        row = {"epoch": epoch, "train_loss": total / len(perm), "val_acc": val_acc}
        result.log.append(row)
        log.info("step1 epoch %d loss %.4f val_acc %.4f", epoch, row["train_loss"], val_acc)
        if val_acc > best_acc:
            best_acc, stale = val_acc, 0
            result.params = copy.deepcopy(params)
            result.best_epoch = epoch
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    test_pairs = [pairs[i] for i in te]
    p_test = predict_pairs(result.params, test_pairs, loader)
    result.test_accuracy = float(np.mean(classify_pair(p_test) == y_all[te]))
    result.train_ids = [pairs[i].pair_id for i in tr]
    result.test_ids = [pairs[i].pair_id for i in te]
    return result


# --- embedding cache ---------------------------------------------------------

@dataclass
class EmbeddingCache:
    pair_ids: list[str]
    matrix: np.ndarray
    params_hash: str
    recomputed: bool = True

    def __post_init__(self):
        self._row = {pid: i for i, pid in enumerate(self.pair_ids)}

    def __getitem__(self, pair_id: str) -> np.ndarray:
        return self.matrix[self._row[pair_id]]

    def __contains__(self, pair_id: str) -> bool:
        return pair_id in self._row

    def __len__(self) -> int:
        return len(self.pair_ids)

    def bag(self, container) -> np.ndarray:
        return self.matrix[[self._row[pid] for pid in container.pair_ids]]

    def save(self, path: str | Path) -> str:
        return store.save(path, {"embeddings": self.matrix},
                          {"kind": "embedding_cache", "params_hash": self.params_hash,
                           "pair_ids": self.pair_ids})

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingCache":
        arrays, meta = store.load(path)
        return cls(list(meta["pair_ids"]), arrays["embeddings"], meta["params_hash"], recomputed=False)


def embed_pairs(pairs, params: EncoderParams, loader, batch: int = 128) -> np.ndarray:
    rows = []
    for s in range(0, len(pairs), batch):
        idx = range(s, min(s + batch, len(pairs)))
        xe, xl = _stack(loader, pairs, idx)
        rows.append(pair_embedding(encode_batch(xe, params), encode_batch(xl, params)))
    return np.concatenate(rows) if rows else np.zeros((0, params.M))


def embed_dataset(containers, params: EncoderParams, loader, cache_path: str | Path | None = None
                  ) -> EmbeddingCache:
    """Embed every pair of every container, reusing ``cache_path`` when its
    recorded parameter hash matches ``params``."""
    h = params.content_hash()
    if cache_path is not None and Path(cache_path).exists():
        cached = EmbeddingCache.load(cache_path)
        wanted = {pid for c in containers for pid in c.pair_ids}
        if cached.params_hash == h and wanted <= set(cached.pair_ids):
            return cached
        log.info("embedding cache at %s is stale; recomputing", cache_path)
    seen, pairs = set(), []
    for c in sorted(containers, key=lambda c: c.tract_id):
        for p in c.pairs:
            if p.pair_id not in seen:
                seen.add(p.pair_id)
                pairs.append(p)
    cache = EmbeddingCache([p.pair_id for p in pairs], embed_pairs(pairs, params, loader), h)
    if cache_path is not None:
        cache.save(cache_path)
    return cache

