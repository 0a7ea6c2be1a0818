"""Dense float32 tensor container and the .bnt binary file format.

The `Tensor` class is the validated carrier used at every module boundary:
a row-major float32 array with an explicit shape, immutable once built.
The `.bnt` format is a fixed little-endian layout:

    bytes 0-3   magic "BNT2"
    byte  4     dtype code (0=real32, 1=int8, 2=packed-trit, 3=packed-int4)
    byte  5     ndim (1..4)
    next        ndim x uint32 shape
    next        uint64 payload byte length
    rest        payload

All multi-byte fields are little-endian, so a file written on any platform
parses identically on every other.
"""

from __future__ import annotations

import enum
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    NonFiniteError,
    ShapeMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"BNT2"
MAX_NDIM = 4

_HEADER_PREFIX = struct.Struct("<4sBB")  # magic, dtype code, ndim
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class DtypeCode(enum.IntEnum):
    """Payload encodings supported by the .bnt container."""

    REAL32 = 0
    INT8 = 1
    PACKED_TRIT = 2
    PACKED_INT4 = 3


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeMismatchError("shape must have at least one dimension")
    if any(s <= 0 for s in shape):
        raise ShapeMismatchError(f"shape entries must be positive, got {shape}")
    return shape


class Tensor:
    """Immutable row-major float32 array with explicit shape.

    Construction validates the two invariants every downstream operation
    relies on: the element count matches the shape, and all values are
    finite. The backing array is marked read-only; share freely.
    """

    __slots__ = ("_data",)

    def __init__(self, shape: Sequence[int], values: Iterable[float] | np.ndarray):
        shape = _check_shape(shape)
        arr = np.asarray(values, dtype=np.float32).reshape(-1)
        n = 1
        for s in shape:
            n *= s
        if arr.size != n:
            raise ShapeMismatchError(
                f"shape {shape} implies {n} elements, got {arr.size}"
            )
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        arr = arr.reshape(shape).copy()
        arr.flags.writeable = False
        self._data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """The backing float32 array (read-only)."""
        return self._data

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Tensor":
        """Build a tensor from any array-like, copying and validating."""
        arr = np.asarray(arr)
        return cls(arr.shape, arr.reshape(-1))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __hash__(self) -> int:  # immutable, but identity hashing is enough
        return id(self)


def from_values(shape: Sequence[int], values: Iterable[float]) -> Tensor:
    """Build a tensor from a flat row-major value list."""
    return Tensor(shape, values)


def allclose(a: Tensor, b: Tensor, atol: float) -> bool:
    """True iff max absolute elementwise difference is <= atol."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    return bool(np.max(np.abs(a.data - b.data), initial=0.0) <= atol)


def write_bnt(
    path: str | Path, code: DtypeCode, shape: Sequence[int], payload: bytes
) -> None:
    """Write a raw .bnt container (any dtype code)."""
    shape = _check_shape(shape)
    if len(shape) > MAX_NDIM:
        raise ShapeMismatchError(
            f"the .bnt format supports at most {MAX_NDIM} dimensions, got {len(shape)}"
        )
    with open(path, "wb") as f:
        f.write(_HEADER_PREFIX.pack(MAGIC, int(code), len(shape)))
        for s in shape:
            f.write(_U32.pack(s))
        f.write(_U64.pack(len(payload)))
        f.write(payload)


def read_bnt(path: str | Path) -> tuple[DtypeCode, tuple[int, ...], bytes]:
    """Read a raw .bnt container, validating magic and payload length."""
    with open(path, "rb") as f:
        raw = f.read()
    prefix_len = _HEADER_PREFIX.size
    if len(raw) < prefix_len:
        raise TruncatedPayloadError("file shorter than the fixed header")
    magic, code_byte, ndim = _HEADER_PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    try:
        code = DtypeCode(code_byte)
    except ValueError:
        raise BadMagicError(f"unknown dtype code {code_byte}") from None
    if not 1 <= ndim <= MAX_NDIM:
        raise TruncatedPayloadError(f"ndim {ndim} outside 1..{MAX_NDIM}")
    offset = prefix_len
    if len(raw) < offset + 4 * ndim + 8:
        raise TruncatedPayloadError("file shorter than the declared header")
    shape = tuple(
        _U32.unpack_from(raw, offset + 4 * i)[0] for i in range(ndim)
    )
    offset += 4 * ndim
    (payload_len,) = _U64.unpack_from(raw, offset)
    offset += 8
    payload = raw[offset:]
    if len(payload) != payload_len:
        raise TruncatedPayloadError(
            f"header declares {payload_len} payload bytes, found {len(payload)}"
        )
    if any(s <= 0 for s in shape):
        raise TruncatedPayloadError(f"non-positive dimension in shape {shape}")
    return code, shape, payload


def save(t: Tensor, path: str | Path) -> None:
    """Write a float32 tensor as a real32 .bnt file (bit-exact round trip)."""
    payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
    write_bnt(path, DtypeCode.REAL32, t.shape, payload)


def load(path: str | Path) -> Tensor:
    """Load a real32 .bnt file written by :func:`save`."""
    code, shape, payload = read_bnt(path)
    if code != DtypeCode.REAL32:
        raise BadMagicError(f"expected a real32 tensor file, got dtype code {code}")
    n = 1
    for s in shape:
        n *= s
    if len(payload) != 4 * n:
        raise TruncatedPayloadError(
            f"real32 payload for shape {shape} must be {4 * n} bytes, got {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return Tensor(shape, arr)
