"""Quantitative distribution diagnostics: outlier metrics, histograms,
rotate-vs-not reconstruction error, and activation capture.

These operationalize the visual claim behind the activation rotation:
spiky, heavy-tailed rows (large excess kurtosis, outlier channels) become
Gaussian-like after the orthonormal transform, so a per-row low-bit
quantizer loses far less information. Because the transform preserves L2
norms, reconstruction error measured in the rotated domain equals the
error contributed in the original domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quant
from .errors import BadRangeError, ShapeMismatchError, UnknownTagError, ZeroVarianceError
from .hadamard import fwht, plan_for
from .tensor import Tensor

OUTLIER_KS = (4, 6)

CAPTURE_TAGS = ("W_qkv", "W_o", "W_up,gate", "W_down")


@dataclass(frozen=True)
class DistStats:
    """Moment summary of a sample: how spiky / heavy-tailed is it?"""

    mean: float
    std: float
    absmax: float
    absmean: float
    excess_kurtosis: float
    outlier_ratio: dict[int, float]


def dist_stats(x: Tensor | np.ndarray) -> DistStats:
    """Population moments plus tail metrics; errors on degenerate input."""
    arr = (x.data if isinstance(x, Tensor) else np.asarray(x)).reshape(-1)
    if arr.size < 2:
        raise ZeroVarianceError("need at least 2 elements for distribution stats")
    arr = arr.astype(np.float64)
    mean = arr.mean()
    centered = arr - mean
    m2 = np.mean(centered**2)
    if m2 == 0.0:
        raise ZeroVarianceError("kurtosis is undefined for constant data")
    m4 = np.mean(centered**4)
    std = float(np.sqrt(m2))
    ratios = {
        k: float(np.mean(np.abs(centered) > k * std)) for k in OUTLIER_KS
    }
    return DistStats(
        mean=float(mean),
        std=std,
        absmax=float(np.max(np.abs(arr))),
        absmean=float(np.mean(np.abs(arr))),
        excess_kurtosis=float(m4 / m2**2 - 3.0),
        outlier_ratio=ratios,
    )


def _try_stats(arr: np.ndarray) -> DistStats | None:
    try:
        return dist_stats(arr)
    except ZeroVarianceError:
        return None


@dataclass(frozen=True)
class RotateCompareReport:
    """Per-token quantization MSE with and without the rotation."""

    bits: int
    mse_direct: float
    mse_rotated: float
    ratio: float  # direct / rotated; > 1 means the rotation helped
    stats_direct: DistStats | None
    stats_rotated: DistStats | None
    per_token_mse_direct: np.ndarray
    per_token_mse_rotated: np.ndarray


def _quantize_dequantize(arr: np.ndarray, bits: int) -> np.ndarray:
    t = Tensor.from_array(arr)
    if bits == 8:
        return quant.dequantize(quant.quantize_act_int8(t)).data
    if bits == 4:
        return quant.dequantize(quant.quantize_act_int4(t)).data
    raise BadRangeError(f"bits must be 4 or 8, got {bits}")


def rotate_compare(x: Tensor, bits: int) -> RotateCompareReport:
    """Compare reconstruction MSE of quantizing x directly vs rotated.

    The rotated-domain error equals the error mapped back to the original
    domain because the transform is orthonormal.
    """
    if len(x.shape) != 2:
        raise ShapeMismatchError(f"expected (tokens, width), got {x.shape}")
    plan_for(x.shape[1])  # validates power-of-two width
    direct = x.data
    rotated = fwht(direct)
    err_d = _quantize_dequantize(direct, bits) - direct
    err_r = _quantize_dequantize(rotated, bits) - rotated
    per_tok_d = np.mean(err_d.astype(np.float64) ** 2, axis=1)
    per_tok_r = np.mean(err_r.astype(np.float64) ** 2, axis=1)
    mse_d = float(per_tok_d.mean())
    mse_r = float(per_tok_r.mean())
    if mse_r == 0.0:
        ratio = 1.0 if mse_d == 0.0 else float("inf")
    else:
        ratio = mse_d / mse_r
    return RotateCompareReport(
        bits=bits,
        mse_direct=mse_d,
        mse_rotated=mse_r,
        ratio=ratio,
        stats_direct=_try_stats(direct),
        stats_rotated=_try_stats(rotated),
        per_token_mse_direct=per_tok_d,
        per_token_mse_rotated=per_tok_r,
    )


@dataclass(frozen=True)
class Histogram:
    """Uniform-bin counts plus the mass outside the range."""

    edges: np.ndarray  # bins + 1 edges
    counts: np.ndarray  # bins
    underflow: int
    overflow: int

    def rows(self) -> list[tuple[str, str, int]]:
        """CSV-ready rows: (lo, hi, count) with underflow/overflow first/last."""
        out = [("-inf", repr(float(self.edges[0])), self.underflow)]
        for i in range(len(self.counts)):
            out.append(
                (repr(float(self.edges[i])), repr(float(self.edges[i + 1])), int(self.counts[i]))
            )
        out.append((repr(float(self.edges[-1])), "+inf", self.overflow))
        return out


def histogram(x: Tensor | np.ndarray, bins: int, lo: float, hi: float) -> Histogram:
    """Counts over uniform bins in [lo, hi]; values outside land in
    underflow/overflow rows so totals are conserved exactly."""
    if bins < 1:
        raise BadRangeError(f"bins must be >= 1, got {bins}")
    if not lo < hi:
        raise BadRangeError(f"need lo < hi, got [{lo}, {hi}]")
    arr = (x.data if isinstance(x, Tensor) else np.asarray(x)).reshape(-1)
    under = int(np.sum(arr < lo))
    over = int(np.sum(arr > hi))
    inside = arr[(arr >= lo) & (arr <= hi)]
    counts, edges = np.histogram(inside, bins=bins, range=(lo, hi))
    return Histogram(edges=edges, counts=counts, underflow=under, overflow=over)


def capture_activations(model, tokens: np.ndarray, tags) -> dict[str, Tensor]:
    """Run a forward pass recording the pre-quantization projection inputs.

    Returns one (tokens, width) tensor per tag, concatenated across layers.
    H-BitLinear tags additionally yield "<tag>:pre_hadamard" with the
    post-norm, pre-rotation rows.
    """
    tags = list(tags)
    for tag in tags:
        if tag not in CAPTURE_TAGS:
            raise UnknownTagError(f"unknown tag {tag!r}; valid: {CAPTURE_TAGS}")
    raw: dict[str, list[np.ndarray]] = {}
    model.forward(np.asarray(tokens), capture=raw)
    out: dict[str, Tensor] = {}
    for tag in tags:
        out[tag] = Tensor.from_array(np.concatenate(raw[tag], axis=0))
        pre_key = f"{tag}:pre_hadamard"
        if pre_key in raw:
            out[pre_key] = Tensor.from_array(np.concatenate(raw[pre_key], axis=0))
    return out
