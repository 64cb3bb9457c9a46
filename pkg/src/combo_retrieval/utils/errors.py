"""Exception hierarchy shared by the retrieval engine."""

from __future__ import annotations


class RetrievalError(Exception):
    """Base class for every error raised by the engine."""


class DimensionError(RetrievalError, ValueError):
    """Tensor shapes do not fit the operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        """Initialize with the operation name and the offending shapes.

        Args:
            op: Operation name.
            shapes: Shapes involved in the mismatch.
        """
        described = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {described}")
        self.op = op
        self.shapes = shapes


class NumericDomainError(RetrievalError, ValueError):
    """A value outside the numeric domain of an operation (NaN, Inf)."""


class ContractError(RetrievalError, RuntimeError):
    """An API contract was violated by the caller."""


class InputError(RetrievalError, ValueError):
    """Invalid domain input."""


class ConfigurationError(RetrievalError, ValueError):
    """Inconsistent configuration or model geometry."""


class FormatError(RetrievalError):
    """A file does not follow the expected binary layout."""


class TruncatedFileError(RetrievalError, OSError):
    """A file ends before its declared payload."""


class StaleIndexError(RetrievalError):
    """An index was built from a different model snapshot."""


class StaleIndexWarning(UserWarning):
    """Warning counterpart of StaleIndexError for callers that continue anyway."""


class TrainingDivergedError(RetrievalError, FloatingPointError):
    """Training produced a non-finite loss."""
