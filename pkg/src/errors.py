"""
Errors - Exception hierarchy shared by every IDProxy module
"""
from typing import Optional, Sequence


class IDProxyError(Exception):
    """Base class for all pipeline errors."""

    error_class = 'IDProxyError'
    exit_code = 1

    def one_line(self) -> str:
        """Machine-parsable single line used by the CLI."""
        message = ' '.join(str(self).split())
        return f"error: {self.error_class}: {message}"


class ConfigurationError(IDProxyError):
    """Invalid configuration value; always names the offending field."""

    error_class = 'ConfigurationError'
    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(IDProxyError):
    """Operands with incompatible shapes."""

    error_class = 'ShapeError'

    def __init__(self, op_name: str, *shapes: Sequence[int]):
        self.op_name = op_name
        self.shapes = [tuple(s) for s in shapes]
        rendered = ' vs '.join(str(s) for s in self.shapes)
        super().__init__(f"{op_name}: incompatible shapes {rendered}")


class DegenerateInputError(IDProxyError):
    """Input that makes an operation undefined (e.g. normalizing a zero vector)."""

    error_class = 'DegenerateInputError'

    def __init__(self, message: str, item_ids: Optional[Sequence[int]] = None,
                 rows: Optional[Sequence[int]] = None):
        self.item_ids = list(item_ids) if item_ids is not None else []
        self.rows = list(rows) if rows is not None else []
        if self.item_ids:
            message = f"{message} (item ids: {self.item_ids[:10]})"
        super().__init__(message)


class NumericError(IDProxyError):
    """Non-finite values where finite ones are required."""

    error_class = 'NumericError'


class PreconditionError(IDProxyError):
    """An operation was called outside its documented precondition."""

    error_class = 'PreconditionError'


class EmptySplitError(IDProxyError):
    """A required train/eval split came out empty."""

    error_class = 'EmptySplitError'


class EmptyTableError(IDProxyError):
    """Every ID-table entry was filtered out."""

    error_class = 'EmptyTableError'


class ProxyNotFoundError(IDProxyError):
    """No proxy record for the requested item."""

    error_class = 'ProxyNotFoundError'

    def __init__(self, item_id: int, variant: Optional[str] = None):
        self.item_id = int(item_id)
        self.variant = variant
        where = f" required by variant {variant}" if variant else ''
        super().__init__(f"no proxy for item {self.item_id}{where}")


class DuplicateRecordError(IDProxyError):
    """The same item id appears twice within one write."""

    error_class = 'DuplicateRecordError'


class VersionConflictError(IDProxyError):
    """A record version does not increase for its item."""

    error_class = 'VersionConflictError'


class ArtifactMismatchError(IDProxyError):
    """Artifacts were produced by incompatible upstream runs."""

    error_class = 'ArtifactMismatchError'


class DependencyError(IDProxyError):
    """A required upstream artifact is missing."""

    error_class = 'DependencyError'
    exit_code = 2

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"missing artifact '{artifact}'; run '{producer}' first")


class UndefinedMetricError(IDProxyError):
    """A metric is undefined for the given input (e.g. AUC with one class)."""

    error_class = 'UndefinedMetricError'


class DegenerateProjectionError(IDProxyError):
    """The embedding set has rank < 2 and cannot be projected to 2D."""

    error_class = 'DegenerateProjectionError'
