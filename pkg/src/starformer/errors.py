"""Exception hierarchy.  The CLI maps these onto exit codes."""


class StarformerError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(StarformerError, ValueError):
    """Bad configuration or input; detected before any work starts."""


class ShapeError(ValidationError):
    pass


class ContractError(StarformerError, ValueError):
    """A function was called outside its preconditions."""


class DataError(ValidationError):
    """Dataset content violates an invariant."""


class ParseError(DataError):
    pass


class StratificationError(DataError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(StarformerError):
    """Checkpoint container is malformed, truncated or of unknown version."""


class NumericError(StarformerError, ArithmeticError):
    """Runtime numerical failure."""


class NonFiniteError(NumericError):
    pass


class DegenerateError(NumericError):
    """Normalization over an empty or all-zero slice."""


class DivergenceError(NumericError):
    pass
