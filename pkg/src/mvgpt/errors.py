"""Exception hierarchy shared across the package."""


class MVGPTError(Exception):
    """Base class for all package errors."""


class DataError(MVGPTError, ValueError):
    """Input records, vocabularies or token sequences violate a contract."""


class NumericalError(MVGPTError, ArithmeticError):
    """A non-finite loss or gradient was encountered during training."""


class GenerationError(MVGPTError, RuntimeError):
    """Autoregressive generation could not produce a valid token."""
