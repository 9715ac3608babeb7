"""Exception types shared across the package."""


class AsisError(Exception):
    """Base class for all errors raised by this package."""

    kind = "error"


class ParameterError(AsisError, ValueError):
    kind = "parameter"


class ContractError(AsisError, ValueError):
    """Inputs violate an operation's precondition (shape mismatch, wrong kernel type)."""

    kind = "contract"


class EmptyMaskError(AsisError, ValueError):
    kind = "empty-mask"


class GenerationError(AsisError, RuntimeError):
    kind = "generation"


class FormatError(AsisError, ValueError):
    """A file on disk does not follow the expected layout."""

    kind = "format"
