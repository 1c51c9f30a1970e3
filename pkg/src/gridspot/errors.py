"""Exception hierarchy shared by every gridspot module."""


class GridspotError(Exception):
    """Base class; the CLI maps it to exit code 2 unless a subclass says otherwise."""


class ValidationError(GridspotError, ValueError):
    """Bad user input: malformed boxes, files, flags. CLI exit code 1."""


class ParseError(ValidationError):
    def __init__(self, message, line=None, source=None):
        self.line = line
        self.source = source
        where = []
        if source is not None:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ConfigError(ValidationError):
    """Inconsistent network, training or tiling configuration."""


class StateError(GridspotError):
    """An operation was called out of order (e.g. backward before forward)."""


class NumericError(GridspotError, ArithmeticError):
    """NaN or infinity where finite values are required."""


class PackingError(GridspotError):
    """Synthetic scene could not place the requested objects."""
