"""Exception hierarchy shared across the package."""


class PCNError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PCNError, ValueError):
    """Invalid hyperparameters or configuration values."""


class ShapeError(PCNError, ValueError):
    """Array shapes or dimensions do not agree."""


class DataError(PCNError, ValueError):
    """Input data contains non-finite or otherwise unusable values."""


class StateError(PCNError, RuntimeError):
    """An object is missing state required by the operation."""


class OptimizationError(PCNError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class SamplingError(PCNError, ValueError):
    """Not enough classes or examples to draw the requested sample."""


class SplitError(PCNError, ValueError):
    """A class cannot be split into train/val/test as requested."""


class FoldError(PCNError, ValueError):
    """A novel class cannot provide a low-shot fold."""


class MetricError(PCNError, ValueError):
    """Metric inputs are inconsistent or empty."""


class ParseError(PCNError, ValueError):
    """A text file could not be parsed."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class UnsupportedVersionError(ParseError):
    """File header declares a format version this build cannot read."""
