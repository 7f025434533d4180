"""Exception hierarchy shared by every lmoe module."""

from __future__ import annotations


class LmoeError(Exception):
    """Base class for all errors raised by lmoe."""


class DimensionError(LmoeError, ValueError):
    pass


class ContractError(LmoeError, ValueError):
    """An operation was called outside its documented preconditions."""


class ConfigError(LmoeError, ValueError):
    pass


class RankError(ConfigError):
    pass


class VocabularyError(LmoeError, ValueError):
    pass


class SequenceLengthError(LmoeError, ValueError):
    pass


class EmptyBatchError(LmoeError, ValueError):
    pass


class DivergenceError(LmoeError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.step = step
        self.diagnostics = diagnostics or {}


class CheckpointError(LmoeError):
    pass


class IntegrityError(CheckpointError):
    pass


class IncompatibleVersionError(CheckpointError):
    pass


class GradCheckError(LmoeError, AssertionError):
    def __init__(self, message: str, failures: list | None = None):
        super().__init__(message)
        self.failures = failures or []
