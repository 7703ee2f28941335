"""Exception types shared across the package."""


class StainFuseError(Exception):
    """Base class for package errors."""


class ShapeError(StainFuseError, ValueError):
    """A tensor has the wrong rank, size, or channel count."""


class ConfigError(StainFuseError, ValueError):
    """A configuration value or file is invalid."""


class DataError(StainFuseError, RuntimeError):
    """Dataset layout, decoding, or pairing failed."""


class NumericalError(StainFuseError, RuntimeError):
    """A non-finite value appeared where finite math was required."""
