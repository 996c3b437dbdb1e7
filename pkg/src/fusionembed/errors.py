"""Exception hierarchy shared by every module."""


class FusionEmbedError(Exception):
    """Base class for all package errors."""


class DimensionError(FusionEmbedError, ValueError):
    """Shapes of embedding sets or parameters do not agree."""


class DomainError(FusionEmbedError, ValueError):
    """An input or intermediate value is outside the valid domain (non-finite, tau <= 0, ...)."""

    def __init__(self, message, pair_index=None):
        super().__init__(message)
        self.pair_index = pair_index


class PreconditionError(FusionEmbedError, ValueError):
    """An operation was called with arguments violating its precondition."""


class DegenerateEmbeddingError(FusionEmbedError, ValueError):
    """A row that must be L2-normalized has (near) zero norm."""


class ConfigError(FusionEmbedError, ValueError):
    """Invalid configuration values."""


class FormatError(FusionEmbedError, ValueError):
    """A dataset or checkpoint file has a bad header or truncated payload."""
