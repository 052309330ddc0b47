"""Exception types shared across the package."""


class RefSegError(Exception):
    """Base class for package errors."""


class ConfigError(RefSegError):
    """Invalid or inconsistent configuration values."""


class GenerationError(RefSegError):
    """Scene or sample generation could not satisfy its invariants."""


class EmptyResultError(RefSegError):
    """A selection operation found no qualifying candidate."""


class InvalidInputError(RefSegError):
    """An input violates a runtime precondition (e.g. all-padding instruction)."""


class TrainingError(RefSegError):
    """Training diverged or prerequisites are missing."""
