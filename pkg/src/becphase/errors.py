"""Exception types shared across the package.

The CLI maps each class to a process exit code.
"""


class BecPhaseError(Exception):
    exit_code = 1


class ConfigurationError(BecPhaseError, ValueError):
    """Invalid input, configuration or dimension mismatch."""

    exit_code = 2

    def __init__(self, message, violations=None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + ":\n  - " + "\n  - ".join(self.violations)
        super().__init__(message)


class NumericError(BecPhaseError, ArithmeticError):
    """A numerical routine failed (non-convergence, norm drift, factorization)."""

    exit_code = 3


class InternalConsistencyError(NumericError):
    """A derived object violated an identity it must satisfy by construction."""


class DivergenceError(BecPhaseError):
    """Too many trajectories diverged for the ensemble averages to be usable."""

    exit_code = 4


class UndefinedVisibilityError(BecPhaseError, ValueError):
    exit_code = 3
