"""Exception taxonomy shared across the package.

Each error class maps to a stable CLI exit code (see EXIT_CODES); tests
assert the specific codes, so renumbering is a breaking change.
"""

from __future__ import annotations


class MlmcGradError(Exception):
    """Base class for all package errors."""


class ConfigError(MlmcGradError):
    """Malformed or inconsistent configuration / CLI input."""


class DivergenceError(MlmcGradError):
    """Optimizer iterate left the finite/trust region.

    Carries the last finite iterate and the iteration index at which the
    guard fired, so callers can salvage partial trajectories.
    """

    def __init__(self, message: str, last_iterate=None, iteration: int | None = None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iteration = iteration


class InapplicableEstimatorError(MlmcGradError):
    """Estimator requested outside its applicability region (e.g. an
    infinite-level scheme on an oracle whose variance does not decay
    faster than the cost grows, b <= c)."""


class BudgetOverflowError(MlmcGradError):
    """A single requested operation cannot fit in the remaining budget."""


class LevelOverflowError(MlmcGradError):
    """A level beyond the hard cap was requested or drawn."""


class UnstableRegimeError(MlmcGradError):
    """Queue simulation requested at a traffic intensity >= 1."""


class InvalidInputError(MlmcGradError):
    """Domain violation on an oracle query or instance constructor."""


class NumericError(MlmcGradError):
    """Numerical failure (non-finite intermediate, root not bracketed...)."""


class InsufficientDataError(MlmcGradError):
    """Not enough usable points for a rate fit (fewer than 4 levels)."""


# CLI exit codes. 1 is reserved for uncategorized failures, 8 for --assert
# band failures (not an exception: the CLI returns it directly).
EXIT_CODES: dict[type[MlmcGradError], int] = {
    ConfigError: 2,
    DivergenceError: 3,
    InapplicableEstimatorError: 4,
    BudgetOverflowError: 5,
    LevelOverflowError: 6,
    UnstableRegimeError: 7,
    InvalidInputError: 9,
    NumericError: 10,
    InsufficientDataError: 10,
}

EXIT_ASSERT_FAILED = 8


def exit_code_for(exc: BaseException) -> int:
    """Exit code for an exception, walking the class hierarchy."""
    for klass in type(exc).__mro__:
        if klass in EXIT_CODES:
            return EXIT_CODES[klass]  # type: ignore[index]
    return 1
