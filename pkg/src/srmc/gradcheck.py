"""Finite-difference gradient checking.

The analytic gradients in this package are validated against central
differences.  Checks run in float64 with eps ~ 1e-5, where the expected
agreement for smooth ops is far better than the 1e-4 relative tolerance
used by the test suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x))
        flat[i] = orig - eps
        fm = float(fn(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise relative error with an absolute floor for near-zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grad(fn: Callable[[np.ndarray], float],
               grad_fn: Callable[[np.ndarray], np.ndarray],
               x: np.ndarray, eps: float = 1e-5, floor: float = 1e-8) -> float:
    """Max relative error between grad_fn(x) and the finite-difference gradient."""
    return rel_error(grad_fn(np.asarray(x, dtype=np.float64)), numeric_grad(fn, x, eps), floor)
