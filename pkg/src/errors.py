"""
Exception types shared across the pipeline.

Everything derives from ValueError so callers that only care about "bad input"
can keep catching ValueError; the CLI maps the three families below onto exit codes.
"""
from typing import Dict, Optional


class GVLMError(ValueError):
    """Base class for all pipeline errors."""


# Usage family (exit 1)
class UsageError(GVLMError):
    """Bad command line or missing required argument."""


class ConfigError(UsageError):
    """Invalid configuration file or flag value."""


# Data family (exit 2)
class DataError(GVLMError):
    """Input data is malformed, inconsistent or missing."""


class DimensionError(DataError):
    """Shape or width mismatch between tensors, parameters or levels."""


class EmptySceneError(DataError):
    """An operation needs at least one Gaussian."""


class VocabularyError(DataError):
    """Token id outside the tokenizer's vocabulary."""


class AnnotationError(DataError):
    """Benchmark annotations cannot produce any item."""


class MissingIdError(DataError):
    """A prediction references a question id that does not exist."""


class DuplicateIdError(DataError):
    """A question id appears more than once."""


class FormatError(DataError):
    """A GSVL scene or GVLP checkpoint could not be decoded."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class FeatureWidthError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ShapeError(FormatError):
    pass


class CheckpointFormatError(FormatError):
    """A decoded checkpoint does not fit the model it is loaded into."""


# Numeric family (exit 3)
class NumericError(GVLMError):
    """Non-finite loss, gradient or parameter."""

    def __init__(self, message: str, diagnostics: Optional[Dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
