"""Shared independent oracles for the test suite.

These deliberately avoid the library's own fast paths: the dense transform
matrix is built by direct recursion, reference quantizers recompute the
formulas in float64, and gradients come from central finite differences.
"""

from __future__ import annotations

import numpy as np


def dense_hadamard(m: int) -> np.ndarray:
    """Build the 2^m x 2^m orthonormal transform matrix by recursion."""
    h = np.array([[1.0]], dtype=np.float64)
    for _ in range(m):
        h = np.block([[h, h], [h, -h]]) / np.sqrt(2.0)
    return h


def central_diff_grad(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float32)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def max_rel_err(approx: np.ndarray, exact: np.ndarray) -> float:
    """Max abs error relative to the larger gradient's scale."""
    scale = max(np.max(np.abs(exact)), np.max(np.abs(approx)), 1e-8)
    return float(np.max(np.abs(approx - exact)) / scale)


def round_half_even(x):
    """Reference round-half-to-even on float64."""
    return np.rint(np.asarray(x, dtype=np.float64))
