"""Exception hierarchy shared across the toolkit."""


class MeshromError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MeshromError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ValidationError):
    """A file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class ShapeError(MeshromError, ValueError):
    pass


class NumericError(MeshromError, ArithmeticError):
    """NaN or Inf appeared in a computation."""


class UnsupportedError(MeshromError, RuntimeError):
    pass


class ConfigError(ValidationError):
    pass


class GenerationError(MeshromError, RuntimeError):
    pass
