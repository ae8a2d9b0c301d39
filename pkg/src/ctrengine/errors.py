"""Exception hierarchy shared across the engine."""


class ValidationError(ValueError):
    """Input data or arguments violate a documented precondition."""


class ConfigurationError(ValidationError):
    """A configuration is inconsistent (bad shapes, unknown keys, mode mismatch)."""


class ParseError(ValidationError):
    """A record in an input file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StreamOrderError(ValidationError):
    """Examples arrived out of timestamp order."""


class AlignmentError(ValidationError):
    """Two prediction logs do not cover the same example ids in the same order."""


class NumericalError(ArithmeticError):
    """Training produced a non-finite quantity and was aborted."""
