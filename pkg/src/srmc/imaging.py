"""PNG emission for sample batches.

Values are clamped to [-1, 1] only here, at the edge; chains themselves
run unclamped.  Identical arrays always produce identical PNG bytes.
"""

from __future__ import annotations

import math

import numpy as np
from PIL import Image


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map to 8-bit: round((v + 1) * 127.5)."""
    arr = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)


def tile_grid(batch: np.ndarray, nrow: int | None = None) -> np.ndarray:
    """(N, C, H, W) -> (C, rows*H, nrow*W), padding short rows with -1."""
    batch = np.asarray(batch)
    if batch.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {batch.shape}")
    n, c, h, w = batch.shape
    if nrow is None:
        root = math.isqrt(n)
        if root * root != n:
            raise ValueError(f"batch of {n} is not square; pass nrow explicitly")
        nrow = root
    rows = -(-n // nrow)
    canvas = np.full((c, rows * h, nrow * w), -1.0, dtype=np.float64)
    for i in range(n):
        r, q = divmod(i, nrow)
        canvas[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = batch[i]
    return canvas


def emit_grid(batch: np.ndarray, path, nrow: int | None = None) -> None:
    """Write a batch as one tiled PNG (grayscale for C=1, RGB for C=3)."""
    canvas = to_uint8(tile_grid(batch, nrow=nrow))
    c = canvas.shape[0]
    if c == 1:
        img = Image.fromarray(canvas[0], mode="L")
    elif c == 3:
        img = Image.fromarray(canvas.transpose(1, 2, 0), mode="RGB")
    else:
        raise ValueError(f"cannot emit {c}-channel images")
    img.save(path, format="PNG")
