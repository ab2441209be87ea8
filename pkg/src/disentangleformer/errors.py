"""Exception types shared across the package.

Every error raised on purpose derives from DisentangleError so callers
(CLI, service) can map them to exit codes / HTTP statuses uniformly.
"""


class DisentangleError(Exception):
    """Base class for all package errors."""


class ShapeError(DisentangleError):
    """Tensor shapes incompatible for the requested operation."""


class ConfigError(DisentangleError):
    """Invalid hyperparameter, unknown kind/variant, or divisibility violation."""


class ContractError(DisentangleError):
    """API misuse: a precondition on values (not shapes or config) was violated."""


class FileFormatError(DisentangleError):
    """Corrupt or truncated binary file. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SingularMatrixError(DisentangleError):
    """Covariance whitening hit a (near-)singular matrix; suggest a ridge."""


class DivergenceError(DisentangleError):
    """Training loss became non-finite."""
