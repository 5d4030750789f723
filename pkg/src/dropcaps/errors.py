"""Exception hierarchy shared across the toolkit."""


class DropcapsError(Exception):
    """Base class; the CLI maps these to exit status 1."""


class ConfigurationError(DropcapsError, ValueError):
    pass


class InputError(DropcapsError, ValueError):
    pass


class NumericError(DropcapsError, ArithmeticError):
    pass


class UsageError(DropcapsError):
    pass


class FormatError(DropcapsError):
    pass


class VersionError(FormatError):
    pass


class ProtocolError(DropcapsError):
    """Raised when an evaluation would reuse training masks or seeds."""


class DivergenceError(NumericError):
    pass
