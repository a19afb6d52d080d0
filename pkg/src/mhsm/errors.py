"""Exception hierarchy shared by every stage.

The CLI maps ``ValidationError`` (and subclasses) to exit code 2 and
``NumericError`` to exit code 3.
"""


class ValidationError(ValueError):
    pass


class ParseError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class ConfigurationError(ValidationError):
    pass


class StageError(ValidationError):
    """A pipeline stage cannot run, typically because a prerequisite artifact is missing."""


class DegenerateInputError(ValidationError):
    pass


class NumericError(ArithmeticError):
    pass


class ConvergenceError(NumericError):
    pass
