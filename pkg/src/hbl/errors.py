"""Exception hierarchy shared by all hbl modules.

Every contract violation raises a subclass of :class:`HblError`, so callers
(including the CLI) can distinguish library errors from genuine bugs.
"""

from __future__ import annotations


class HblError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(HblError):
    """Operand shapes are incompatible with the operation's contract."""


class NonFiniteError(HblError):
    """A value that must be finite is NaN or infinite."""


class BadMagicError(HblError):
    """A .bnt file does not start with the expected magic bytes."""


class TruncatedPayloadError(HblError):
    """A .bnt file's payload does not match the length declared in its header."""


class NotPowerOfTwoError(HblError):
    """A transform length that must be a power of two is not."""


class EmptyTensorError(HblError):
    """An operation requiring a non-empty tensor received an empty one."""


class BadBitWidthError(HblError):
    """An unsupported bit width was requested."""


class NonTernaryValueError(HblError):
    """A value outside {-1, 0, +1} was passed where only trits are allowed."""


class CodeOutOfRangeError(HblError):
    """An integer code lies outside the representable range of its format."""


class AccumulatorOverflowError(HblError):
    """The inner dimension is large enough that int32 accumulation could overflow."""


class MissingContextError(HblError):
    """A backward pass was called without a saved forward context."""


class ConfigMismatchError(HblError):
    """A resume checkpoint is incompatible with the requested configuration."""


class ZeroVarianceError(HblError):
    """Distribution statistics were requested for degenerate (constant) data."""


class BadRangeError(HblError):
    """A histogram range or bin count is invalid."""


class UnknownTagError(HblError):
    """An activation-capture tag does not exist in the model."""


class DivergedLossError(HblError):
    """Training loss became NaN/Inf. Carries the partial loss curve.

    Divergence is a measured outcome (ablations may legitimately diverge),
    so the exception keeps everything needed to still write a report.
    """

    def __init__(self, step: int, losses: list[float], message: str | None = None):
        self.step = step
        self.losses = losses
        super().__init__(message or f"loss diverged at step {step}")
