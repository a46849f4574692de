"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Array shapes or grids do not line up."""


class InvalidInputError(ValueError):
    """Input values are malformed (e.g. non-finite coordinates)."""


class InvalidParameterError(ValueError):
    """A configuration parameter is outside its admissible range."""


class UndefinedMetricError(ValueError):
    """A metric has a zero denominator (e.g. identical images, empty labels)."""


class ParseError(ValueError):
    """A file on disk could not be decoded."""


class UsageError(RuntimeError):
    """An API was called in the wrong order or with the wrong kind of argument."""


class DivergenceError(FloatingPointError):
    """A numerical integration produced non-finite values.

    ``step`` is the index of the offending step when known.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
