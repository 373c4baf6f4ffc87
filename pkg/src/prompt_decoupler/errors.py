"""
Exception hierarchy shared by every prompt_decoupler component.

Each error also derives from the closest builtin exception so callers may catch
either the specific class or the builtin one.
"""


class DecouplerError(Exception):
    """Base class for all prompt_decoupler errors."""


class ShapeError(DecouplerError, ValueError):
    """Tensor or batch extents do not agree."""


class DomainError(DecouplerError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ContractError(DecouplerError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(DecouplerError, ArithmeticError):
    """A computation produced a non-finite value."""


class TapeLookupError(DecouplerError, LookupError):
    """A tensor is not recorded on the gradient tape being queried."""


class VocabularyError(DecouplerError, LookupError):
    """A word or token id is outside the closed vocabulary."""


class DataError(DecouplerError, ValueError):
    """A dataset or sample cannot satisfy the request."""


class FormatError(DecouplerError, ValueError):
    """A file on disk does not match the expected layout."""


class TrainingError(DecouplerError, RuntimeError):
    """Optimization diverged or produced a non-finite loss."""


class PlanError(DecouplerError, ValueError):
    """An ablation plan is malformed or self-contradictory."""


class ConfigError(DecouplerError, ValueError):
    """A run configuration is missing keys or contains unknown ones."""


class ResolutionError(DecouplerError, FileNotFoundError):
    """A referenced artifact does not exist."""
