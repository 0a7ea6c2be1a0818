"""Bit-packed matrix storage and exact integer GEMM.

Ternary weights pack 4 values per byte (2-bit codes, value+1, lowest-order
trit in bits 0-1). INT4 activation codes pack two two's-complement nibbles
per byte, low nibble first. The GEMM accumulates trit x code products in
int32 and applies the combined weight/activation scales once per output,
so it is exact in the integer domain; only the final scale multiply is
subject to float rounding.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .errors import (
    AccumulatorOverflowError,
    BadBitWidthError,
    BadMagicError,
    CodeOutOfRangeError,
    NonTernaryValueError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from .tensor import DtypeCode, Tensor, read_bnt, write_bnt

if TYPE_CHECKING:
    from .quant import QuantizedActivation

# int32 accumulation of int8 codes (|code| <= 128) is exact while
# k * 128 < 2**31, i.e. k <= 2**23.
MAX_GEMM_K = 1 << 23


@dataclass(frozen=True)
class PackedTritMatrix:
    """{-1,0,+1} matrix stored as 2-bit codes, 4 per byte, row-major."""

    rows: int
    cols: int
    data: bytes

    def __post_init__(self):
        expect = (self.rows * self.cols + 3) // 4
        if len(self.data) != expect:
            raise ShapeMismatchError(
                f"{self.rows}x{self.cols} trits need {expect} bytes, got {len(self.data)}"
            )

    def unpack(self) -> np.ndarray:
        """Decode to an int8 (rows, cols) array of {-1, 0, +1}."""
        b = np.frombuffer(self.data, dtype=np.uint8)
        codes = np.empty(len(b) * 4, dtype=np.int8)
        codes[0::4] = b & 3
        codes[1::4] = (b >> 2) & 3
        codes[2::4] = (b >> 4) & 3
        codes[3::4] = (b >> 6) & 3
        return (codes[: self.rows * self.cols] - 1).reshape(self.rows, self.cols)

    def save(self, path: str | Path) -> None:
        write_bnt(path, DtypeCode.PACKED_TRIT, (self.rows, self.cols), self.data)

    @classmethod
    def load(cls, path: str | Path) -> "PackedTritMatrix":
        code, shape, payload = read_bnt(path)
        if code != DtypeCode.PACKED_TRIT:
            raise BadMagicError(f"expected a packed-trit file, got dtype code {code}")
        if len(shape) != 2:
            raise TruncatedPayloadError(f"packed-trit files are 2-D, got shape {shape}")
        return cls(rows=shape[0], cols=shape[1], data=payload)


@dataclass(frozen=True)
class PackedInt4Matrix:
    """Codes in [-8, 7] stored as two's-complement nibbles, low nibble first."""

    rows: int
    cols: int
    data: bytes

    def __post_init__(self):
        expect = (self.rows * self.cols + 1) // 2
        if len(self.data) != expect:
            raise ShapeMismatchError(
                f"{self.rows}x{self.cols} nibbles need {expect} bytes, got {len(self.data)}"
            )

    def unpack(self) -> np.ndarray:
        """Decode to an int8 (rows, cols) array of codes in [-8, 7]."""
        b = np.frombuffer(self.data, dtype=np.uint8)
        codes = np.empty(len(b) * 2, dtype=np.int16)
        codes[0::2] = b & 0xF
        codes[1::2] = b >> 4
        codes = np.where(codes > 7, codes - 16, codes)
        return codes[: self.rows * self.cols].astype(np.int8).reshape(self.rows, self.cols)

    def save(self, path: str | Path) -> None:
        write_bnt(path, DtypeCode.PACKED_INT4, (self.rows, self.cols), self.data)

    @classmethod
    def load(cls, path: str | Path) -> "PackedInt4Matrix":
        code, shape, payload = read_bnt(path)
        if code != DtypeCode.PACKED_INT4:
            raise BadMagicError(f"expected a packed-int4 file, got dtype code {code}")
        if len(shape) != 2:
            raise TruncatedPayloadError(f"packed-int4 files are 2-D, got shape {shape}")
        return cls(rows=shape[0], cols=shape[1], data=payload)


def pack_trit_array(arr: np.ndarray) -> PackedTritMatrix:
    """Pack a 2-D integer-valued array of {-1, 0, +1}."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D array, got shape {arr.shape}")
    flat = arr.reshape(-1)
    if not np.isin(flat, (-1, 0, 1)).all():
        raise NonTernaryValueError("values must all be in {-1, 0, +1}")
    codes = (flat.astype(np.int16) + 1).astype(np.uint8)
    pad = (-codes.size) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return PackedTritMatrix(rows=arr.shape[0], cols=arr.shape[1], data=packed.tobytes())


def pack_int4_array(arr: np.ndarray) -> PackedInt4Matrix:
    """Pack a 2-D integer-valued array of codes in [-8, 7]."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D array, got shape {arr.shape}")
    flat = arr.reshape(-1).astype(np.int32)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise CodeOutOfRangeError("int4 codes must lie in [-8, 7]")
    nibbles = (flat & 0xF).astype(np.uint8)
    pad = (-nibbles.size) % 2
    if pad:
        nibbles = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    pairs = nibbles.reshape(-1, 2)
    packed = pairs[:, 0] | (pairs[:, 1] << 4)
    return PackedInt4Matrix(rows=arr.shape[0], cols=arr.shape[1], data=packed.tobytes())


def pack_trits(values: Tensor) -> PackedTritMatrix:
    """Pack a ternary-valued 2-D tensor losslessly."""
    return pack_trit_array(values.data)


def unpack_trits(packed: PackedTritMatrix) -> Tensor:
    """Inverse of :func:`pack_trits`."""
    return Tensor.from_array(packed.unpack().astype(np.float32))


def pack_int4(values: Tensor) -> PackedInt4Matrix:
    """Pack a 2-D tensor of integer codes in [-8, 7] losslessly."""
    arr = values.data
    if not np.array_equal(arr, np.rint(arr)):
        raise CodeOutOfRangeError("int4 codes must be integers")
    return pack_int4_array(arr.astype(np.int32))


def unpack_int4(packed: PackedInt4Matrix) -> Tensor:
    """Inverse of :func:`pack_int4`."""
    return Tensor.from_array(packed.unpack().astype(np.float32))


def gemm_ternary_int(
    w: PackedTritMatrix, xq: "QuantizedActivation", alpha: float
) -> Tensor:
    """Ternary-weight x low-bit-activation product via integer accumulation.

    Computes Y[t, o] = alpha * dequant_scale[t] * sum_k trit[o, k] * code[t, k]
    with the sum in int32, so the result equals the real-arithmetic product
    of the dequantized operands up to the final float scale multiply.
    """
    from .quant import ActMode  # local import to avoid a module cycle

    if xq.mode not in (ActMode.INT8, ActMode.INT4):
        raise ShapeMismatchError(f"gemm supports INT8/INT4 activations, got {xq.mode}")
    if w.cols != xq.width:
        raise ShapeMismatchError(
            f"inner dimensions disagree: weight k={w.cols}, activation k={xq.width}"
        )
    if w.cols > MAX_GEMM_K:
        raise AccumulatorOverflowError(
            f"k={w.cols} exceeds the int32-safe bound {MAX_GEMM_K}"
        )
    trits = w.unpack().astype(np.int32)  # (out, k)
    codes = xq.code_matrix().astype(np.int32)  # (tokens, k)
    acc = codes @ trits.T  # (tokens, out), exact in int32
    scale = (np.float32(alpha) * xq.dequant_scale()).astype(np.float32)
    y = acc.astype(np.float32) * scale[:, None]
    return Tensor.from_array(y)


def gemm_reference(wd: Tensor, xd: Tensor) -> Tensor:
    """Dense real-arithmetic GEMM oracle: Y[t, o] = sum_k Wd[o, k] * Xd[t, k].

    Accumulates in float64 one output column at a time with no packing or
    integer tricks; this is the independent cross-check for the packed
    kernel.
    """
    if len(wd.shape) != 2 or len(xd.shape) != 2:
        raise ShapeMismatchError("gemm_reference expects 2-D operands")
    out, k = wd.shape
    tokens, k2 = xd.shape
    if k != k2:
        raise ShapeMismatchError(f"inner dimensions disagree: {k} vs {k2}")
    x64 = xd.data.astype(np.float64)
    w64 = wd.data.astype(np.float64)
    y = np.empty((tokens, out), dtype=np.float64)
    for o in range(out):
        y[:, o] = x64 @ w64[o]
    return Tensor.from_array(y.astype(np.float32))


@dataclass(frozen=True)
class BenchResult:
    """Timing and data-movement accounting for one GEMM configuration."""

    m: int
    n: int
    k: int
    act_bits: int
    seconds_per_iter: list[float]
    checksum: float
    weight_bytes: int
    activation_bytes: int
    bytes_per_output: float


def bench_gemm(
    m: int, n: int, k: int, act_bits: int, iters: int, seed: int
) -> BenchResult:
    """Time the packed kernel and report bytes moved per output element.

    Activation traffic is m*k at act_bits/8 bytes per element; halving the
    activation width halves that term exactly.
    """
    from . import quant

    if act_bits not in (4, 8):
        raise BadBitWidthError(f"act_bits must be 4 or 8, got {act_bits}")
    rng = np.random.default_rng(seed)
    w = pack_trit_array(rng.integers(-1, 2, size=(n, k)).astype(np.int8))
    x = Tensor.from_array(rng.standard_normal((m, k)).astype(np.float32))
    cfg = quant.QuantConfig()
    if act_bits == 8:
        xq = quant.quantize_act_int8(x, cfg)
    else:
        xq = quant.quantize_act_int4(x, cfg)
    alpha = 1.0
    times: list[float] = []
    checksum = 0.0
    for _ in range(iters):
        t0 = time.perf_counter()
        y = gemm_ternary_int(w, xq, alpha)
        times.append(time.perf_counter() - t0)
        checksum = float(np.float32(y.data.sum(dtype=np.float64)))
    weight_bytes = (n * k + 3) // 4
    activation_bytes = m * k * act_bits // 8
    return BenchResult(
        m=m,
        n=n,
        k=k,
        act_bits=act_bits,
        seconds_per_iter=times,
        checksum=checksum,
        weight_bytes=weight_bytes,
        activation_bytes=activation_bytes,
        bytes_per_output=(weight_bytes + activation_bytes) / (m * n),
    )
