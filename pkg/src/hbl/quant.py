"""Weight and activation quantizers plus the straight-through gradient rule.

Weights: per-tensor absmean ternary. The scale alpha is the mean absolute
value of the full matrix; trits are round_clip(W / alpha, -1, 1) and the
dequantized matrix is alpha * trits.

Activations, per token (row):
  INT8  gamma = max|row|;  codes = round_clip(127 * row / gamma, -128, 127)
        dequant = gamma/127 * codes
  INT4  beta = mean|row|;  codes = round_clip(sqrt(7) * row / beta, -8, 7)
        dequant = beta/sqrt(7) * codes
  KV    unsigned b-bit, post-rotary attention states:
        codes = round_clip(row/gamma * 2^(b-1) + 2^(b-1), 0, 2^b - 1)
        dequant = (codes - 2^(b-1)) * gamma / 2^(b-1)

Scale denominators are guarded with max(scale_stat, epsilon) so an all-zero
row quantizes to all-zero codes instead of dividing by zero; for any
non-degenerate row the guard is inactive and the exact statistic is used.
Rounding is half-to-even everywhere, which keeps results bit-reproducible
across platforms.

All quantizers share one gradient rule: the straight-through estimator,
which treats the quantizer as the identity in the backward pass.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .errors import BadBitWidthError, EmptyTensorError, ShapeMismatchError
from .tensor import Tensor

SQRT7 = math.sqrt(7.0)


@dataclass(frozen=True)
class QuantConfig:
    """Shared quantizer knobs. Rounding mode is fixed (half-to-even)."""

    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


DEFAULT_CONFIG = QuantConfig()


class ActMode(enum.Enum):
    INT8 = "int8"
    INT4 = "int4"
    KV_UNSIGNED = "kv_unsigned"


@dataclass(frozen=True)
class TernaryWeight:
    """Packed {-1,0,+1} matrix with its per-tensor absmean scale."""

    rows: int
    cols: int
    trits: kernels.PackedTritMatrix
    alpha: float

    def trit_matrix(self) -> np.ndarray:
        return self.trits.unpack()


@dataclass(frozen=True)
class QuantizedActivation:
    """Per-token quantized activation rows.

    `scale_per_token` holds the raw per-token statistic (gamma for absmax
    modes, beta for INT4 absmean); the dequantization step is derived from
    it per mode. INT4 codes are stored nibble-packed; INT8 codes as int8;
    KV codes as unsigned uint8 with a per-token bit width (BOS-flagged
    tokens keep 8 bits regardless of the requested width).
    """

    n_tokens: int
    width: int
    mode: ActMode
    codes: np.ndarray | kernels.PackedInt4Matrix
    scale_per_token: np.ndarray
    bits_per_token: np.ndarray | None = None

    def code_matrix(self) -> np.ndarray:
        """Integer codes as an (n_tokens, width) array."""
        if isinstance(self.codes, kernels.PackedInt4Matrix):
            return self.codes.unpack()
        return self.codes

    def dequant_scale(self) -> np.ndarray:
        """Per-token multiplier taking codes back to real values."""
        if self.mode == ActMode.INT8:
            return (self.scale_per_token / np.float32(127.0)).astype(np.float32)
        if self.mode == ActMode.INT4:
            return (self.scale_per_token / np.float32(SQRT7)).astype(np.float32)
        half = np.exp2(self.bits_per_token.astype(np.float32) - 1.0)
        return (self.scale_per_token / half).astype(np.float32)


def round_clip(x: Tensor, a: int, b: int) -> Tensor:
    """Round half-to-even, then clamp to [a, b]."""
    if a >= b:
        raise ValueError(f"need a < b, got [{a}, {b}]")
    return Tensor(x.shape, np.clip(np.rint(x.data), a, b).reshape(-1))


def _round_clip_array(x: np.ndarray, a: float, b: float) -> np.ndarray:
    return np.clip(np.rint(x), a, b)


def _guard(stat: np.ndarray | np.float32, eps: float) -> np.ndarray | np.float32:
    return np.maximum(stat, np.float32(eps))


def ternary_array(w: np.ndarray, eps: float = DEFAULT_CONFIG.epsilon):
    """Array-level ternary quantization: returns (trits int8, alpha float32)."""
    if w.size == 0:
        raise EmptyTensorError("cannot quantize an empty matrix")
    w = np.asarray(w, dtype=np.float32)
    alpha = np.float32(np.mean(np.abs(w), dtype=np.float32))
    trits = _round_clip_array(w / _guard(alpha, eps), -1, 1).astype(np.int8)
    return trits, alpha


def quantize_weight(w: Tensor, cfg: QuantConfig = DEFAULT_CONFIG) -> TernaryWeight:
    """Per-tensor absmean ternary quantization of a 2-D weight matrix."""
    if len(w.shape) != 2:
        raise ShapeMismatchError(f"expected a 2-D weight matrix, got {w.shape}")
    trits, alpha = ternary_array(w.data, cfg.epsilon)
    return TernaryWeight(
        rows=w.shape[0],
        cols=w.shape[1],
        trits=kernels.pack_trit_array(trits),
        alpha=float(alpha),
    )


def dequantize_weight(tw: TernaryWeight) -> Tensor:
    """alpha * trits as a float32 tensor."""
    return Tensor.from_array(np.float32(tw.alpha) * tw.trit_matrix().astype(np.float32))


def int8_rows(x: np.ndarray, eps: float = DEFAULT_CONFIG.epsilon):
    """Array-level INT8 row quantization: (codes int8, gamma float32 per row)."""
    x = np.asarray(x, dtype=np.float32)
    gamma = np.max(np.abs(x), axis=-1).astype(np.float32)
    s = np.float32(127.0) / _guard(gamma, eps)
    codes = _round_clip_array(x * s[:, None], -128, 127).astype(np.int8)
    return codes, gamma


def int4_rows(x: np.ndarray, eps: float = DEFAULT_CONFIG.epsilon):
    """Array-level INT4 row quantization: (codes int8, beta float32 per row)."""
    x = np.asarray(x, dtype=np.float32)
    beta = np.mean(np.abs(x), axis=-1, dtype=np.float32).astype(np.float32)
    s = np.float32(SQRT7) / _guard(beta, eps)
    codes = _round_clip_array(x * s[:, None], -8, 7).astype(np.int8)
    return codes, beta


def kv_unsigned_rows(
    x: np.ndarray,
    bits: int,
    bos_mask: np.ndarray | None,
    eps: float = DEFAULT_CONFIG.epsilon,
):
    """Array-level unsigned KV quantization with per-token bit widths."""
    if bits not in (3, 4, 8):
        raise BadBitWidthError(f"supported KV widths are 3, 4 and 8 bits, got {bits}")
    x = np.asarray(x, dtype=np.float32)
    n_tokens = x.shape[0]
    bits_per_token = np.full(n_tokens, bits, dtype=np.uint8)
    if bos_mask is not None:
        bos_mask = np.asarray(bos_mask, dtype=bool)
        if bos_mask.shape != (n_tokens,):
            raise ShapeMismatchError(
                f"bos mask must have shape ({n_tokens},), got {bos_mask.shape}"
            )
        bits_per_token[bos_mask] = 8
    gamma = np.max(np.abs(x), axis=-1).astype(np.float32)
    half = np.exp2(bits_per_token.astype(np.float32) - 1.0)
    top = np.exp2(bits_per_token.astype(np.float32)) - 1.0
    scaled = x / _guard(gamma, eps)[:, None] * half[:, None] + half[:, None]
    codes = np.clip(np.rint(scaled), 0.0, top[:, None]).astype(np.uint8)
    return codes, gamma, bits_per_token


def _as_token_matrix(x: Tensor) -> np.ndarray:
    if len(x.shape) != 2:
        raise ShapeMismatchError(f"expected (tokens, width), got {x.shape}")
    return x.data


def quantize_act_int8(x: Tensor, cfg: QuantConfig = DEFAULT_CONFIG) -> QuantizedActivation:
    """Per-token absmax INT8 quantization."""
    arr = _as_token_matrix(x)
    codes, gamma = int8_rows(arr, cfg.epsilon)
    return QuantizedActivation(
        n_tokens=arr.shape[0],
        width=arr.shape[1],
        mode=ActMode.INT8,
        codes=codes,
        scale_per_token=gamma,
    )


def quantize_act_int4(x: Tensor, cfg: QuantConfig = DEFAULT_CONFIG) -> QuantizedActivation:
    """Per-token absmean INT4 quantization, nibble-packed."""
    arr = _as_token_matrix(x)
    codes, beta = int4_rows(arr, cfg.epsilon)
    return QuantizedActivation(
        n_tokens=arr.shape[0],
        width=arr.shape[1],
        mode=ActMode.INT4,
        codes=kernels.pack_int4_array(codes),
        scale_per_token=beta,
    )


def quantize_kv_unsigned(
    x: Tensor,
    bits: int,
    bos_mask: Sequence[bool] | np.ndarray | None = None,
    cfg: QuantConfig = DEFAULT_CONFIG,
) -> QuantizedActivation:
    """Unsigned absmax quantization for post-rotary attention states.

    Zero maps to the exact midpoint code 2^(bits-1). Tokens flagged in
    `bos_mask` are kept at 8 bits regardless of the requested width.
    """
    arr = _as_token_matrix(x)
    mask = None if bos_mask is None else np.asarray(bos_mask, dtype=bool)
    codes, gamma, bits_per_token = kv_unsigned_rows(arr, bits, mask, cfg.epsilon)
    return QuantizedActivation(
        n_tokens=arr.shape[0],
        width=arr.shape[1],
        mode=ActMode.KV_UNSIGNED,
        codes=codes,
        scale_per_token=gamma,
        bits_per_token=bits_per_token,
    )


def dequantize(qa: QuantizedActivation) -> Tensor:
    """Map codes back to real values using the per-token scale."""
    codes = qa.code_matrix().astype(np.float32)
    if qa.mode == ActMode.KV_UNSIGNED:
        half = np.exp2(qa.bits_per_token.astype(np.float32) - 1.0)
        centered = codes - half[:, None]
        vals = centered * (qa.scale_per_token / half)[:, None]
    else:
        vals = codes * qa.dequant_scale()[:, None]
    return Tensor.from_array(vals.astype(np.float32))


def ste_backward(upstream: Tensor) -> Tensor:
    """Straight-through estimator: the quantizer's gradient is the identity."""
    return upstream
