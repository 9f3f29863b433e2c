"""Exception types shared across the package."""


class LureError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(LureError, ValueError):
    """A network, mask or run configuration is inconsistent."""


class InputError(LureError, ValueError):
    """An argument is outside the operation's domain."""


class ProtocolError(LureError, RuntimeError):
    """Operations were called in an invalid order."""


class ParseError(LureError, ValueError):
    """A data file could not be decoded."""


class DivergenceError(LureError, FloatingPointError):
    """Training produced a non-finite loss."""
