"""Exception types shared across the package.

Every error carries a short machine-readable code used by the CLI to emit
single-line diagnostics (``error[<code>]: <message>``).
"""


class NMSparseError(Exception):
    """Base class for all package errors."""

    code = "error"


class ShapeError(NMSparseError):
    """Tensor dimensions are incompatible with the requested operation."""

    code = "shape"


class DomainError(NMSparseError):
    """A scalar argument or index is outside the operation's domain."""

    code = "domain"


class PatternError(NMSparseError):
    """Data violates the N:M structured-sparsity constraint."""

    code = "pattern"


class FormatError(NMSparseError):
    """A container file does not follow the binary format."""

    code = "format"


class LengthError(FormatError):
    """A container payload is truncated or has trailing bytes."""

    code = "length"


class ValidationError(NMSparseError):
    """Decoded data fails a semantic invariant (non-finite values, bad indices)."""

    code = "validation"


class ConfigError(NMSparseError):
    """A model or pipeline configuration is inconsistent."""

    code = "config"


class CalibrationError(NMSparseError):
    """Calibration statistics are unusable (e.g. an all-zero channel)."""

    code = "calibration"


class DegenerateWeightsError(NMSparseError):
    """Weight statistics collapse (zero variance) so scoring is undefined."""

    code = "degenerate"


class PlanningError(NMSparseError):
    """No skip plan can satisfy the requested compute budget."""

    code = "planning"


class ParamsError(NMSparseError):
    """Quantization parameters are invalid (non-positive scale)."""

    code = "params"
