"""Exception hierarchy shared by every sftnet module."""


class SftnetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SftnetError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(SftnetError, ValueError):
    """A scalar argument or named parameter is invalid or missing."""


class ConfigError(SftnetError, ValueError):
    """A model or run configuration violates one of its constraints."""


class ValidationError(SftnetError, ValueError):
    """Input values fall outside the domain an operation accepts."""


class NonFiniteError(SftnetError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(SftnetError, ValueError):
    """A serialized file is malformed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
