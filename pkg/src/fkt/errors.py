"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to, so the command layer can
translate failures without a lookup table.
"""


class FKTError(Exception):
    exit_code = 1


class InvalidInput(FKTError, ValueError):
    exit_code = 2


class InvalidConfig(FKTError, ValueError):
    """Config failed validation. ``field`` is the dot-path of the offending key."""

    exit_code = 2

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class DegenerateEmbedding(FKTError, ValueError):
    exit_code = 3


class DivergenceError(FKTError, RuntimeError):
    exit_code = 3


class IncompatibleCheckpoint(FKTError):
    exit_code = 4


class CorruptCheckpoint(FKTError):
    exit_code = 4


class IngestError(FKTError, OSError):
    exit_code = 5


class IntegrityError(IngestError):
    exit_code = 5


class PersistenceError(FKTError, OSError):
    exit_code = 5


class EmptyEpoch(FKTError, ValueError):
    exit_code = 2
