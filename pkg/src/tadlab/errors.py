"""Shared exception types.

Every error raised on purpose by this package derives from TadlabError so
callers (and the CLI) can separate our failures from genuine bugs.
"""


class TadlabError(Exception):
    """Base class for all package errors."""


class ConfigError(TadlabError):
    """A configuration value violates its documented constraints."""


class ShapeError(TadlabError):
    """Array shapes are incompatible with the requested operation."""


class FormatError(TadlabError):
    """An on-disk artifact is malformed; `offset` points at the bad byte."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class LookupFailure(TadlabError):
    """A requested key (category, clip, tensor name) does not exist."""


class UsageError(TadlabError):
    """An API was called in a way its contract forbids."""


class CheckpointError(TadlabError):
    """A checkpoint is missing, inconsistent, or incompatible."""


class TrainingFailure(TadlabError):
    """Training aborted (e.g. non-finite loss); diagnostics were dumped."""
