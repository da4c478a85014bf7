"""Exception hierarchy shared across the package.

Every error carries a short machine-parseable ``category`` that the CLI
prints on failure (exit code stays nonzero, first stderr line is
``error: <category>: <message>``).
"""


class CosegError(Exception):
    category = "internal"


class ShapeError(CosegError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    category = "shape"


class ContractError(CosegError, ValueError):
    """A documented precondition was violated by the caller."""

    category = "contract"


class ConfigError(CosegError, ValueError):
    """Bad configuration value or key."""

    category = "config"


class DataError(CosegError, ValueError):
    """Dataset ingestion problem (unreadable file, stem mismatch, bad mask)."""

    category = "data"


class CheckpointError(CosegError, ValueError):
    """Malformed checkpoint container. ``offset`` is the failing byte offset."""

    category = "checkpoint-format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConvergenceError(CosegError, RuntimeError):
    """An iterative solver exhausted its budget where convergence is required."""

    category = "convergence"
