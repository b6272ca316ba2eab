"""Image loading and scaling to [0, 1] float tensors."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image


def to_unit(arr: np.ndarray) -> np.ndarray:
    """Per-channel scale to [0, 1] float64; uint8 input is divided by 255."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64, copy=False)


def read_rgb(path: str | Path, side: int | None = None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if side is not None and im.size != (side, side):
            im = im.resize((side, side), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8)


def write_png(path: str | Path, arr: np.ndarray) -> None:
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode="RGB").save(path, format="PNG", optimize=False)


class FileLoader:
    """Resolve ``pixels_ref`` paths (absolute or relative to ``root``) to uint8 RGB arrays."""

    def __init__(self, root: str | Path = ".", side: int | None = None, cache_size: int = 65536):
        self.root = Path(root)
        self.side = side
        self._read = lru_cache(maxsize=cache_size)(self._read_uncached)

    def _read_uncached(self, ref: str) -> np.ndarray:
        p = Path(ref)
        if not p.is_absolute():
            p = self.root / p
        return read_rgb(p, self.side)

    def __call__(self, ref: str) -> np.ndarray:
        return self._read(ref)
