"""Hadamard-rotated low-bit quantization stack.

Ternary absmean weights, per-token INT8/INT4 activation quantizers, an
orthonormal fast Walsh-Hadamard rotation for outlier suppression, packed
integer GEMM kernels, explicit-gradient transformer layers, and a
deterministic desk-scale quantization-aware training loop.
"""

from . import diagnostics, hadamard, kernels, layers, quant, tensor, toytrain
from .errors import HblError

__all__ = [
    "HblError",
    "diagnostics",
    "hadamard",
    "kernels",
    "layers",
    "quant",
    "tensor",
    "toytrain",
]

__version__ = "0.1.0"
