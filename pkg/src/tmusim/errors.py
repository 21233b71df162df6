"""Exception hierarchy shared by the simulator modules."""


class TmuError(Exception):
    """Base class for all simulator errors."""


class MemoryRangeError(TmuError):
    """Access outside the simulated memory, or overlapping live tensors."""


class ShapeError(TmuError):
    """Tensor shapes incompatible with the requested operator."""


class ParamError(TmuError):
    """Operator parameters missing or invalid for the operator kind."""


class NonIntegralIndexError(TmuError):
    """An affine index mapping produced a non-integer component."""


class AsmError(TmuError):
    """Assembly source rejected; carries line/column diagnostics."""

    def __init__(self, message, line=None, col=None):
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", col {col}" if col is not None else "")
            message = f"{loc}: {message}"
        super().__init__(message)
        self.line = line
        self.col = col


class EncodingError(TmuError):
    """Instruction cannot be encoded (field overflow)."""


class DecodeError(TmuError):
    """Binary instruction stream malformed or truncated."""


class MaskError(TmuError):
    """Masking-engine configuration or stream shape invalid."""


class SchedulerError(TmuError):
    """System scheduler detected no progress with pending work."""
