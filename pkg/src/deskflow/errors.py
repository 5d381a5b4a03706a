"""Exception hierarchy shared by every module."""


class DeskflowError(Exception):
    """Base class for toolkit errors."""


class DimensionError(DeskflowError, ValueError):
    pass


class ContractError(DeskflowError, ValueError):
    pass


class DegenerateInputError(DeskflowError, ValueError):
    pass


class FormatError(DeskflowError, ValueError):
    """Malformed dataset or persisted artifact."""


class ConfigError(DeskflowError, ValueError):
    pass


class ConflictError(DeskflowError, ValueError):
    pass


class StateError(DeskflowError, RuntimeError):
    pass


class VersionError(DeskflowError, RuntimeError):
    pass


class LengthError(DeskflowError, IndexError):
    """Sequence does not fit in the model context."""


class TokenIndexError(DeskflowError, IndexError):
    pass


class NonFiniteError(DeskflowError, FloatingPointError):
    """NaN or Inf produced by an op or found in a gradient."""


class SinkError(DeskflowError, RuntimeError):
    """A streaming consumer raised; ``emitted`` holds the text delivered before the failure."""

    def __init__(self, message: str, emitted: str, n_tokens: int):
        super().__init__(message)
        self.emitted = emitted
        self.n_tokens = n_tokens


class DegenerateGenerationError(DeskflowError, RuntimeError):
    pass
