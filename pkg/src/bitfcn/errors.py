"""Exception types shared across the package."""


class BitfcnError(Exception):
    """Base class for all package-specific errors."""


class BadBitWidth(BitfcnError):
    """Bit-width outside the supported range."""


class CodeOverflow(BitfcnError):
    """An unsigned code does not fit in the requested bit-width."""


class LengthMismatch(BitfcnError):
    """Bit planes of different element counts were combined."""


class ShapeMismatch(BitfcnError):
    """Tensor shapes are inconsistent for the requested operation."""


class BitWidthMismatch(BitfcnError):
    """Operand bit-widths are inconsistent or unsupported by a kernel."""


class AccumulatorOverflowRisk(BitfcnError):
    """The worst-case accumulator value would not fit in 62 bits."""


class BadConfig(BitfcnError):
    """Invalid configuration value."""


class NonDivisibleInput(BitfcnError):
    """Input spatial size is not divisible by the network's largest stride."""


class BadLabels(BitfcnError):
    """Label map contains values outside [0, C-1] and the ignore value."""


class BadSchedule(BitfcnError):
    """Invalid bit-width decay schedule."""


class BadConstant(BitfcnError):
    """Invalid constant in the class-weighting formula."""


class MissingAsset(BitfcnError):
    """A training route was asked to start from an asset that is absent."""


class DivergenceDetected(BitfcnError):
    """Training loss stayed non-finite for too many consecutive iterations."""


class BadCrop(BitfcnError):
    """Crop window does not fit inside the sample."""


class EmptyMatrix(BitfcnError):
    """Confusion matrix has no class with a nonzero union."""
