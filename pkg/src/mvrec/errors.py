"""Exception hierarchy shared across the package.

Every error carries a stable ``code`` (the class name) so CLI output stays
machine-parseable, and an ``exit_code`` that separates problems with user
input (bad flags, bad files, bad episode parameters: 2) from internal
failures (numerical or state errors: 1).
"""

from __future__ import annotations


class MvrecError(Exception):
    """Base class for all package errors."""

    exit_code: int = 1

    @property
    def code(self) -> str:
        return type(self).__name__

    def one_line(self) -> str:
        # single line, no newlines, suitable for stderr parsing
        msg = " ".join(str(self).split())
        return f"{self.code}: {msg}"


class UsageError(MvrecError):
    """Bad invocation: unknown flags, malformed config, invalid combinations."""

    exit_code = 2


class ZeroVector(MvrecError):
    """Cosine similarity requested against a vector with near-zero norm."""


class ShapeMismatch(MvrecError):
    """Operands disagree on dimensionality or length."""


class IndexOutOfRange(MvrecError):
    """A label or index lies outside the valid range."""


class EmptyInstance(MvrecError):
    """A defect instance has an empty pixel mask."""

    exit_code = 2


class MissingMask(MvrecError):
    """An image is annotated as defective but no mask file exists."""

    exit_code = 2


class UnknownClass(MvrecError):
    """A class name not present in the manifest was requested."""

    exit_code = 2


class InsufficientShots(MvrecError):
    """A class has fewer training instances than the requested shot count."""

    exit_code = 2


class CorruptFile(MvrecError):
    """A binary embedding file failed structural validation."""

    exit_code = 2

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MissingViews(MvrecError):
    """An instance does not have the full set of expected view embeddings."""

    exit_code = 2

    def __init__(self, message: str, report: dict[str, list[str]] | None = None):
        super().__init__(message)
        # instance id -> sorted list of absent view ids
        self.report: dict[str, list[str]] = report or {}


class ChannelMismatch(MvrecError):
    """Embedding dimensionality differs between file header and expectation."""

    exit_code = 2


class NonFiniteLoss(MvrecError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message: str, iteration: int = -1):
        super().__init__(message)
        self.iteration = iteration


class UntrainedState(MvrecError):
    """Prediction was requested from a model that requires training first."""


class CoverageError(MvrecError):
    """An export covered fewer instances than the manifest requires."""

    exit_code = 2
