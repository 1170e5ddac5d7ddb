"""Exception types shared across the package."""


class BlfmError(Exception):
    """Base class for all package errors."""


class ParseError(BlfmError, ValueError):
    """A ratings file line could not be parsed."""

    def __init__(self, message, line_number=None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class EmptyDatasetError(BlfmError, ValueError):
    def __init__(self, message="empty dataset"):
        super().__init__(message)


class SplitError(BlfmError, ValueError):
    pass


class ShapeMismatchError(BlfmError, ValueError):
    """Model/posterior dimensions disagree with the dataset they are used on."""


class DivergenceError(BlfmError, ArithmeticError):
    """Training produced non-finite parameters or objective values.

    ``iteration`` is the epoch/iteration at which the problem was detected.
    ``suggestion`` is a human-readable hint (e.g. reduce the step size).
    """

    def __init__(self, message, iteration, suggestion=None):
        self.iteration = iteration
        self.suggestion = suggestion
        full = f"{message} (iteration {iteration})"
        if suggestion:
            full += f"; {suggestion}"
        super().__init__(full)
