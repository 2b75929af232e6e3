"""Exception types shared across the package."""


class OSBPError(Exception):
    """Base class for all package errors."""


class ShapeError(OSBPError, ValueError):
    pass


class ValidationError(OSBPError, ValueError):
    pass


class ConfigError(OSBPError, ValueError):
    pass


class FormatError(OSBPError, ValueError):
    pass


class UsageError(OSBPError, RuntimeError):
    pass
