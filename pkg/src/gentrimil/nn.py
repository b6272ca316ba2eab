"""Small numpy neural-network kit: strided convolutions, backbones, Adam.

Arrays are NHWC float64.  Every layer exposes an explicit forward that
returns a cache and a backward that consumes it, so gradients can be checked
against finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else out[()]


def softmax(s):
    s = np.asarray(s, dtype=np.float64)
    e = np.exp(s - s.max())
    return e / e.sum()


def conv3x3_s2_forward(x, w, b):
    """3x3 convolution, stride 2, zero padding 1.  ``w`` is (9*C_in, C_out)."""
    n, h, wd, c = x.shape
    ho, wo = (h - 1) // 2 + 1, (wd - 1) // 2 + 1
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # read-only (n, ho, wo, ki, kj, c) window view; reshape makes the one copy
    s0, s1, s2, s3 = xp.strides
    win = as_strided(xp, (n, ho, wo, 3, 3, c), (s0, 2 * s1, 2 * s2, s1, s2, s3), writeable=False)
    cols = win.reshape(n * ho * wo, 9 * c)
    out = (cols @ w + b).reshape(n, ho, wo, -1)
    return out, (cols, x.shape, w)


def conv3x3_s2_backward(dout, cache):
    cols, xshape, w = cache
    n, h, wd, c = xshape
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = cols.T @ d2
    db = d2.sum(axis=0)
    dcols = (d2 @ w.T).reshape(n, ho, wo, 9, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + 2 * ho:2, kj:kj + 2 * wo:2, :] += dcols[:, :, :, ki * 3 + kj, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


class ConvBackbone:
    """Conv blocks (3x3, stride 2, ReLU, channels doubling), global average
    pooling, then a linear map to ``d`` dimensions."""

    kind = "conv"

    def __init__(self, d=64, depth=4, base_channels=8, image_side=64, seed=0, zero_head=False):
        self.d = d
        self.depth = depth
        self.base_channels = base_channels
        self.image_side = image_side
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        c_in = 3
        for i in range(depth):
            c_out = base_channels * 2 ** i
            fan_in = 9 * c_in
            self.params[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, c_out))
            self.params[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        scale = 0.0 if zero_head else np.sqrt(1.0 / c_in)
        self.params["head.w"] = rng.normal(0.0, 1.0, (c_in, d)) * scale
        self.params["head.b"] = np.zeros(d)

    @property
    def input_shape(self):
        return (self.image_side, self.image_side, 3)

    def config(self) -> dict:
        return {"kind": self.kind, "d": self.d, "depth": self.depth,
                "base_channels": self.base_channels, "image_side": self.image_side}

    def forward(self, x):
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"image batch shape {x.shape[1:]} != configured {self.input_shape}")
        caches = []
        h = x
        for i in range(self.depth):
            z, c = conv3x3_s2_forward(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            h = np.maximum(z, 0.0)
            caches.append((c, z > 0))
        pooled = h.mean(axis=(1, 2))
        out = pooled @ self.params["head.w"] + self.params["head.b"]
        return out, (caches, pooled, h.shape)

    def backward(self, dout, cache):
        caches, pooled, hshape = cache
        grads = {"head.w": pooled.T @ dout, "head.b": dout.sum(axis=0)}
        dpool = dout @ self.params["head.w"].T
        n, hh, ww, c = hshape
        dh = np.broadcast_to(dpool[:, None, None, :] / (hh * ww), hshape)
        for i in reversed(range(self.depth)):
            c_i, mask = caches[i]
            dz = dh * mask
            dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = conv3x3_s2_backward(dz, c_i)
        return grads


class IdentityBackbone:
    """Pass-through 'encoder' for vector inputs; has no parameters."""

    kind = "identity"

    def __init__(self, d):
        self.d = d
        self.params: dict[str, np.ndarray] = {}

    @property
    def input_shape(self):
        return (self.d,)

    def config(self) -> dict:
        return {"kind": self.kind, "d": self.d}

    def forward(self, x):
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} != configured {self.input_shape}")
        return np.array(x, dtype=np.float64), None

    def backward(self, dout, cache):
        return {}


def backbone_from_config(cfg: dict, params: dict | None = None):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == "conv":
        bb = ConvBackbone(**cfg)
    elif kind == "identity":
        bb = IdentityBackbone(cfg["d"])
    else:
        raise ValueError(f"unknown backbone kind {kind!r}")
    if params is not None:
        for k in bb.params:
            bb.params[k] = np.array(params[k], dtype=np.float64)
    return bb


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            self.params[k] -= self.lr * corr * m / (np.sqrt(v) + self.eps)


def max_relative_error(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray],
                       floor: float = 1e-8) -> float:
    worst = 0.0
    for k in numeric:
        a, n = np.asarray(analytic[k]), np.asarray(numeric[k])
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(rel.max(initial=0.0)))
    return worst


def numeric_gradients(loss_fn, params: dict[str, np.ndarray], eps: float = 1e-5,
                      keys=None) -> dict[str, np.ndarray]:
    """Central finite differences of ``loss_fn()`` w.r.t. each entry of ``params`` (in place)."""
    out = {}
    for k in keys or params:
        p = params[k]
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out[k] = g
    return out
