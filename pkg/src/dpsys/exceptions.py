"""Exception hierarchy.

The CLI maps these onto exit codes: validation problems exit with 2,
infeasible designs with 3 and numerical failures with 4.
"""


class DpsysError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DpsysError, ValueError):
    """Bad arguments: wrong shapes, out-of-range budgets, horizons, ..."""


class DimensionError(ValidationError):
    pass


class UnstableSystemError(ValidationError):
    """An operation that needs a Schur-stable matrix got an unstable one."""


class RankDeficiencyError(ValidationError):
    """A rank condition (strong input observability, ...) does not hold."""


class InfeasibleError(DpsysError):
    """An LMI / design problem has no solution at the requested level.

    ``estimate`` carries a lower bound on the feasible level when one is
    known (e.g. the bisected minimum H-infinity bound).
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NumericalError(DpsysError):
    """Iteration failed to converge or a solver returned garbage."""
