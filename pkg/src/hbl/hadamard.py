"""Normalized fast Walsh-Hadamard transform and its gradient.

The transform is the orthonormal rotation applied to activations before
low-bit quantization: it spreads any single large channel across the full
width, reshaping spiky distributions into Gaussian-like ones. Because the
transform matrix is symmetric and orthonormal, the backward pass is the
same computation applied to the incoming gradient.

The in-place butterfly runs m = log2(n) unnormalized stages and applies a
single 1/sqrt(n) scale at the end (fewer roundings than 1/sqrt(2) per
stage, identical result in exact arithmetic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotPowerOfTwoError, ShapeMismatchError
from .tensor import Tensor


@dataclass(frozen=True)
class HadamardPlan:
    """Transform length n = 2**m plus the final normalization scale."""

    n: int
    m: int
    scale: float  # 1/sqrt(n), applied once after the butterflies


def plan_for(n: int) -> HadamardPlan:
    """Build a plan for length n, rejecting non-powers-of-two."""
    if n < 1 or (n & (n - 1)) != 0:
        raise NotPowerOfTwoError(f"transform length must be a power of two, got {n}")
    m = n.bit_length() - 1
    return HadamardPlan(n=n, m=m, scale=1.0 / math.sqrt(n))


def fwht(x: np.ndarray) -> np.ndarray:
    """Normalized Walsh-Hadamard transform over the last axis (float32).

    Accepts any leading batch shape; the last axis length must be a power
    of two. Returns a new array; the input is never modified.
    """
    x = np.asarray(x, dtype=np.float32)
    n = x.shape[-1]
    if n < 1 or (n & (n - 1)) != 0:
        raise NotPowerOfTwoError(f"last axis must be a power of two, got {n}")
    lead = x.shape[:-1]
    y = x.reshape(-1, n).copy()
    h = 1
    while h < n:
        y = y.reshape(-1, n // (2 * h), 2, h)
        top = y[:, :, 0, :].copy()
        y[:, :, 0, :] += y[:, :, 1, :]
        y[:, :, 1, :] = top - y[:, :, 1, :]
        y = y.reshape(-1, n)
        h *= 2
    y *= np.float32(1.0 / math.sqrt(n))
    return y.reshape(*lead, n)


def fwht_rows(w: np.ndarray) -> np.ndarray:
    """Transform each row of a 2-D array; used for weight-rotation mode."""
    if w.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D array, got shape {w.shape}")
    return fwht(w)


def hadamard_forward(x: Tensor, plan: HadamardPlan) -> Tensor:
    """Apply the orthonormal transform to each length-n row of x.

    Preserves the L2 norm of every row (orthogonality).
    """
    if x.shape[-1] != plan.n:
        raise ShapeMismatchError(
            f"last dimension {x.shape[-1]} does not match plan length {plan.n}"
        )
    return Tensor(x.shape, fwht(x.data).reshape(-1))


def hadamard_backward(g: Tensor, plan: HadamardPlan) -> Tensor:
    """Gradient of the transform: the identical computation.

    The transform matrix is symmetric orthonormal, so the Jacobian
    transpose equals the matrix itself.
    """
    return hadamard_forward(g, plan)
