"""Exception hierarchy.

``DataError`` covers malformed or inconsistent input (CLI exit code 1),
``ConvergenceError`` covers numerical failures of a solver (exit code 2).
"""


class MewlwError(Exception):
    """Base class for all package errors."""


class DataError(MewlwError):
    """Input data violates the schema or an invariant."""


class ConvergenceError(MewlwError):
    """A solver failed to reach its tolerance."""


class SeparationError(ConvergenceError):
    """Logistic fit diverged (complete or quasi-complete separation)."""


class DegenerateProblemError(MewlwError):
    """The estimating equations are identically zero (e.g. all weights zero)."""
