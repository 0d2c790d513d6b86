"""Datasets: built-in toy distributions, synthetic images, and loaders.

Pixels always map to [-1, 1] via v / 127.5 - 1; toy samples arrive as
(n, dim) float arrays.  Directory loads are ordered lexicographically so
a dataset is a pure function of its files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
from PIL import Image, UnidentifiedImageError

from .gridmodel import GridModel


@dataclass(frozen=True)
class ToySpec:
    """A named toy distribution with its sampler and true log density."""

    name: str
    dim: int
    lo: float
    hi: float
    sample: Callable[[int, np.random.Generator], np.ndarray]
    log_density: Callable[[np.ndarray], np.ndarray]   # unnormalized


def _gauss1d_sample(n, rng):
    return (1.0 + 0.5 * rng.standard_normal(n)).reshape(-1, 1)


def _gauss1d_logp(pts):
    x = pts[:, 0]
    return -0.5 * ((x - 1.0) / 0.5) ** 2


def _mixture1d_sample(n, rng):
    signs = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return (signs + 0.3 * rng.standard_normal(n)).reshape(-1, 1)


def _mixture1d_logp(pts):
    x = pts[:, 0]
    a = np.exp(-0.5 * ((x + 1.0) / 0.3) ** 2)
    b = np.exp(-0.5 * ((x - 1.0) / 0.3) ** 2)
    return np.log(0.5 * a + 0.5 * b + 1e-300)

_MIX2D_CENTERS = np.array([[0.8, 0.8], [-0.8, 0.8], [-0.8, -0.8], [0.8, -0.8]])
_MIX2D_SD = 0.25


def _mixture2d_sample(n, rng):
    comp = rng.integers(0, 4, size=n)
    return _MIX2D_CENTERS[comp] + _MIX2D_SD * rng.standard_normal((n, 2))


def _mixture2d_logp(pts):
    d2 = ((pts[:, None, :] - _MIX2D_CENTERS[None, :, :]) ** 2).sum(axis=2)
    return np.log(np.exp(-0.5 * d2 / _MIX2D_SD ** 2).sum(axis=1) + 1e-300)


_TOYS = {
    "gauss1d": ToySpec("gauss1d", 1, -2.5, 4.5, _gauss1d_sample, _gauss1d_logp),
    "mixture1d": ToySpec("mixture1d", 1, -2.5, 2.5, _mixture1d_sample, _mixture1d_logp),
    "mixture2d": ToySpec("mixture2d", 2, -2.0, 2.0, _mixture2d_sample, _mixture2d_logp),
}


def toy_names() -> list[str]:
    return sorted(_TOYS)


def toy(name: str) -> ToySpec:
    if name not in _TOYS:
        raise KeyError(f"unknown toy {name!r}; known: {', '.join(toy_names())}")
    return _TOYS[name]


def sample_toy(name: str, n: int, seed: int = 0) -> np.ndarray:
    spec = toy(name)
    return spec.sample(n, np.random.default_rng(seed))


def toy_grid(name: str, n: int | None = None) -> GridModel:
    """The toy's true density on its reference lattice (1024 or 256 per axis)."""
    spec = toy(name)
    if n is None:
        n = 1024 if spec.dim == 1 else 256
    return GridModel.from_log_density(spec.log_density, spec.lo, spec.hi, n, dim=spec.dim)


# -- synthetic images ---------------------------------------------------


def make_blobs32(n: int, seed: int = 0) -> np.ndarray:
    """n grayscale 32x32 images of 2-4 soft blobs on a dark field.

    Deterministic in (n, seed); values lie in [-1, 1], float32, shaped
    (n, 1, 32, 32).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    out = np.empty((n, 1, 32, 32), dtype=np.float32)
    for i in range(n):
        k = int(rng.integers(2, 5))
        img = np.full((32, 32), -1.0)
        for _ in range(k):
            cx, cy = rng.uniform(6.0, 26.0, size=2)
            s = rng.uniform(2.5, 4.0)
            amp = rng.uniform(1.5, 2.2)
            img += amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        out[i, 0] = np.clip(img, -1.0, 1.0)
    return out


# -- file loading -------------------------------------------------------


def _to_unit_range(arr_u8: np.ndarray) -> np.ndarray:
    return arr_u8.astype(np.float64) / 127.5 - 1.0


def load_image_dir(path, dtype=np.float64) -> np.ndarray:
    """All PNG images under path, lexicographic, as (n, C, H, W) in [-1, 1].

    All files must share one resolution and one mode (grayscale or RGB);
    an empty directory or an unreadable file is an error, never an empty
    dataset.
    """
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(".png"))
    if not names:
        raise ValueError(f"no PNG images in {path}")
    images = []
    shape = None
    for name in names:
        full = os.path.join(path, name)
        try:
            with Image.open(full) as im:
                im = im.convert(im.mode if im.mode in ("L", "RGB") else "RGB")
                arr = np.asarray(im)
        except (UnidentifiedImageError, OSError) as e:
            raise ValueError(f"cannot read image {full}: {e}") from None
        if arr.ndim == 2:
            arr = arr[None, :, :]
        else:
            arr = arr.transpose(2, 0, 1)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"mixed image shapes: {name} is {arr.shape[1:]}, "
                             f"expected {shape[1:]} with {shape[0]} channel(s)")
        images.append(_to_unit_range(arr))
    return np.stack(images).astype(dtype)


def load_array(path, dtype=np.float64) -> np.ndarray:
    """A .npy tensor dataset: (n, dim) points or (n, C, H, W) images."""
    arr = np.load(path)
    if arr.ndim not in (2, 4):
        raise ValueError(f"{path}: expected an (n, dim) or (n, C, H, W) array, "
                         f"got shape {arr.shape}")
    return arr.astype(dtype)


def load_dataset(source, n: int = 10_000, seed: int = 0, dtype=np.float64) -> np.ndarray:
    """Resolve a dataset reference: toy name, .npy file, or image directory."""
    if isinstance(source, str) and source in _TOYS:
        return sample_toy(source, n, seed=seed).astype(dtype)
    if os.path.isdir(source):
        return load_image_dir(source, dtype=dtype)
    if str(source).endswith(".npy"):
        return load_array(source, dtype=dtype)
    raise ValueError(f"cannot resolve dataset {source!r}: not a toy name, "
                     f".npy file, or image directory")
