"""Exception taxonomy shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class InputError(ToolkitError):
    """Malformed user input: files, CSV rows, config values, CLI arguments."""


class PgmError(InputError):
    """Malformed PGM stream.  Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MetadataError(InputError):
    """Missing or contradictory acquisition metadata."""


class TrainingAbort(ToolkitError):
    """Optimization was halted because the numerical state is poisoned."""
