"""Exception hierarchy shared across the package."""


class ThermCountError(Exception):
    """Base class for all errors raised by thermcount."""


class InvalidParameter(ThermCountError, ValueError):
    """A scalar parameter is outside its admissible range."""


class InvalidInput(ThermCountError, ValueError):
    """An input array or object violates a precondition (shape, bounds, emptiness)."""


class InvalidConfiguration(ThermCountError, ValueError):
    """Components were configured inconsistently, or a config file is malformed."""


class ParseError(ThermCountError, ValueError):
    """A file on disk could not be parsed. The message names the offending file."""


class MissingArtifact(ThermCountError, FileNotFoundError):
    """A dataset, checkpoint or report that a command depends on does not exist."""


class NumericFailure(ThermCountError, FloatingPointError):
    """A non-finite loss or prediction was detected."""
