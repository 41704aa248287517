"""Exception types shared across the package."""


class RadgenError(Exception):
    """Base class for all radgen errors."""


class ShapeError(RadgenError):
    """An array or tensor has an incompatible shape."""


class ConfigError(RadgenError):
    """A configuration value is missing, unknown, or out of range."""


class DegenerateBasisError(RadgenError):
    """Orthogonalization hit a (near-)linearly-dependent column."""


class ZeroNormError(RadgenError):
    """A vector that must be normalized has (near-)zero norm."""


class BatchTooSmallError(RadgenError):
    """An operation needs more samples than the batch provides."""


class LengthExceededError(RadgenError):
    """A sequence is longer than the configured maximum."""


class ParseError(RadgenError):
    """A manifest or config file could not be parsed."""


class MissingFileError(RadgenError):
    """A referenced file does not exist on disk."""


class NonFiniteError(RadgenError):
    """A numeric computation produced NaN or Inf."""


class EmptyCorpusError(RadgenError):
    """A metric or vocabulary operation received an empty corpus."""
