"""Exception types shared across the package."""


class R3Error(Exception):
    """Base class for all package errors."""


class DimensionError(R3Error, ValueError):
    pass


class NumericError(R3Error, ArithmeticError):
    pass


class ContractError(R3Error, RuntimeError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(R3Error, ValueError):
    pass


class RangeError(R3Error, IndexError):
    pass


class FormatError(R3Error, ValueError):
    """A file does not follow its documented container layout."""


class ValidationError(R3Error, ValueError):
    """A parsed record violates a geometry or vocabulary invariant."""


class OOVError(R3Error, KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"out-of-vocabulary word: {self.word!r}"
