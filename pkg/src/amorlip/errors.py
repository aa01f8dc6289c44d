"""Exception types shared across the package."""


class AmorlipError(Exception):
    """Base class for every error raised by this package."""


class ContractError(AmorlipError):
    """An argument violated a documented shape or value contract."""


class DomainError(AmorlipError):
    """Mathematically invalid input (empty reduction, non-positive scale, ...)."""


class DegenerateInputError(AmorlipError):
    """Input is well-formed but numerically unusable (zero-norm row, one-sample batch, ...)."""


class ConfigError(AmorlipError):
    """Bad configuration value or combination."""


class FormatError(AmorlipError):
    """Malformed binary file. Carries the byte offset of the failure when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OracleError(AmorlipError):
    """The finite-difference oracle hit a non-finite evaluation."""


class TrainingDivergence(AmorlipError):
    """Training produced a non-finite loss. Carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = dict(snapshot or {})
