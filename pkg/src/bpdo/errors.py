"""Exception types shared across the package.

Everything user-facing raises a subclass of :class:`BpdoError`, so callers
(and the CLI) can distinguish structured failures from genuine bugs.
"""


class BpdoError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(BpdoError, ValueError):
    """An argument violates an operation's precondition."""


class ParseError(BpdoError, ValueError):
    """An annotation file is malformed. Message names the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(BpdoError, ValueError):
    """A binary container is corrupt, truncated, or has a bad header."""


class GenerationError(BpdoError, RuntimeError):
    """The synthetic scene generator could not satisfy its constraints."""


class DegenerateComponentError(BpdoError, ValueError):
    """A mask component is too small to trace into a polygon."""


class ConfigError(BpdoError, ValueError):
    """A configuration file or checkpoint is inconsistent with its use."""


class FitAbortError(BpdoError, RuntimeError):
    """Training was aborted, e.g. because a loss component went non-finite."""
