"""Exception types shared across the package."""


class MobileUtrError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MobileUtrError, ValueError):
    """Invalid shapes, hyper-parameters or model configuration."""


class InputError(MobileUtrError, ValueError):
    """Caller supplied data that violates an operation's precondition."""


class NumericError(MobileUtrError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class UsageError(MobileUtrError, RuntimeError):
    """API misuse, e.g. calling backward without a recorded tape."""


class StateError(MobileUtrError, RuntimeError):
    """Corrupted internal state (e.g. negative running variance)."""


class ParseError(MobileUtrError, ValueError):
    """Malformed file contents. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
