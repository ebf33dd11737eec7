"""Error types; same single-line CLI convention as the consumer package."""

from __future__ import annotations


class ExporterError(Exception):
    exit_code: int = 1

    @property
    def code(self) -> str:
        return type(self).__name__

    def one_line(self) -> str:
        msg = " ".join(str(self).split())
        return f"{self.code}: {msg}"


class UsageError(ExporterError):
    """Bad flags or config values."""

    exit_code = 2


class ModelLoadError(ExporterError):
    """The requested backbone or its local weights are unavailable."""

    exit_code = 2


class ImageMissing(ExporterError):
    """An image referenced by the manifest cannot be found or decoded."""

    exit_code = 2


class KeyCollision(ExporterError):
    """Two records would share the same instance_id/view_id key."""

    exit_code = 2
