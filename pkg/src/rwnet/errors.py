"""Exception types shared across the package."""


class RWNetError(Exception):
    """Base class for all errors raised by rwnet."""


class InvalidInputError(RWNetError, ValueError):
    pass


class ParseError(InvalidInputError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StateError(RWNetError, RuntimeError):
    pass


class ConfigurationError(RWNetError, ValueError):
    pass


class ContractError(RWNetError, RuntimeError):
    pass


class NumericError(RWNetError, ArithmeticError):
    def __init__(self, message, **context):
        self.context = context
        if context:
            where = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({where})"
        super().__init__(message)
