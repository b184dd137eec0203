"""Exception taxonomy for the repronum package.

All errors derive from :class:`RepronumError` so callers can catch broadly.
``FormatError`` carries an optional source line number for file diagnostics;
the CLI maps it (and its subclasses) to exit code 1.
"""


class RepronumError(Exception):
    """Base class for all package errors."""


class ParameterError(RepronumError, ValueError):
    """Invalid hyperparameter or configuration value."""


class DomainError(RepronumError, ValueError):
    """Mathematical function evaluated outside its domain."""


class DataError(RepronumError, ValueError):
    """Input data violates a model precondition (shape, degeneracy)."""


class FormatError(RepronumError, ValueError):
    """Malformed input file.

    Parameters
    ----------
    message : str
        Human-readable diagnostic.
    line : int or None
        1-based line number in the offending file, when known.
    """

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class GraphError(FormatError):
    """Territory graph failed validation."""
