"""Exception types shared across the package.

Every error carries a machine-parsable ``code`` so the CLI can print
``error_code: <CODE>`` lines on stderr.
"""

from __future__ import annotations


class SkelfontError(Exception):
    """Base class for all package errors."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.__doc__)


class MissingFile(SkelfontError):
    """A required input file does not exist."""

    code = "MISSING_FILE"


class UnsupportedFormat(SkelfontError):
    """Input image is not an 8-bit grayscale or RGB PNG."""

    code = "UNSUPPORTED_FORMAT"


class IoError(SkelfontError):
    """Reading or writing a file failed."""

    code = "IO_ERROR"


class ChannelMismatch(SkelfontError):
    """Classifier head length does not match the feature channel count."""

    code = "CHANNEL_MISMATCH"


class ShapeMismatch(SkelfontError):
    """Tensor or image shapes are inconsistent."""

    code = "SHAPE_MISMATCH"


class BadSpatialSize(SkelfontError):
    """Spatial size violates an architecture constraint (e.g. not divisible by 4)."""

    code = "BAD_SPATIAL_SIZE"


class NonFiniteLoss(SkelfontError):
    """A loss term became NaN or infinite; the training step is aborted."""

    code = "NON_FINITE_LOSS"


class EmptyStyle(SkelfontError):
    """A style directory contains no usable images."""

    code = "EMPTY_STYLE"


class DuplicateCharId(SkelfontError):
    """The same (style, char_id) pair appears more than once."""

    code = "DUPLICATE_CHAR_ID"


class ExhaustedSplit(SkelfontError):
    """The batch index ran past the end of the split for this epoch."""

    code = "EXHAUSTED_SPLIT"


class ConfigError(SkelfontError):
    """A configuration value or combination is invalid."""

    code = "CONFIG_ERROR"


class ConfigNotFound(ConfigError):
    """A referenced configuration file does not exist."""

    code = "CONFIG_NOT_FOUND"


class ManifestMismatch(SkelfontError):
    """Checkpoint manifest disagrees with the current model configuration."""

    code = "MANIFEST_MISMATCH"


class InsufficientClasses(SkelfontError):
    """Classifier training needs at least two glyph classes."""

    code = "INSUFFICIENT_CLASSES"


class UnknownLabel(SkelfontError):
    """A label is outside the classifier's class set."""

    code = "UNKNOWN_LABEL"


class EmptyInput(SkelfontError):
    """An operation that needs at least one element received none."""

    code = "EMPTY_INPUT"


class DimensionMismatch(SkelfontError):
    """Feature statistics have different dimensionality."""

    code = "DIMENSION_MISMATCH"


class DegenerateHistogramWarning(UserWarning):
    """Otsu thresholding saw a constant image; the result is an empty grid."""


class IterationLimitWarning(UserWarning):
    """Thinning stopped at the iteration cap before reaching a fixed point."""
