"""Exception hierarchy shared by every stage.

The CLI maps these onto exit codes: configuration problems exit 2, bad input
data exits 3 and numerical divergence exits 4.
"""


class EcglangError(Exception):
    """Base class for all package errors."""


class ConfigError(EcglangError, ValueError):
    """Invalid configuration; ``key`` names the offending dotted path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class DataError(EcglangError, ValueError):
    """Input data violates a format or domain invariant."""


class MalformedHeaderError(DataError):
    pass


class NonFiniteSampleError(DataError):
    pass


class SamplingRateError(DataError):
    pass


class LabelLengthError(DataError):
    pass


class DivergenceError(EcglangError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
