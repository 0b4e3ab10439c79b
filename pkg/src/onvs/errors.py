"""Exception taxonomy shared across modules.

The CLI maps these onto process exit codes, so everything user-facing should
raise one of them (or a subclass) rather than a bare ValueError.
"""


class OnvsError(Exception):
    """Base class for package errors."""


class ConfigError(OnvsError):
    """Invalid configuration: unknown keys, indivisible sizes, bad ranges."""


class DataError(OnvsError):
    """Dataset problems. Carries a short machine-parsable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class DivergenceError(OnvsError):
    """Training produced non-finite or runaway losses."""


class CheckpointError(OnvsError):
    """Checkpoint/archive missing, corrupt, or incompatible."""
