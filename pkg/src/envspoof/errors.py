"""Exception types shared across the pipeline."""


class DimensionError(ValueError):
    """Array shapes do not line up."""


class ParameterError(ValueError):
    """An argument is outside its allowed range."""


class FormatError(ValueError):
    """A file or token does not follow the expected format."""


class NumericError(ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


class StateError(RuntimeError):
    """An operation was applied to an object in the wrong state."""
