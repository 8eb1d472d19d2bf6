"""Exception hierarchy.

Data problems (bad input, non-monotone patterns) and fitting problems
(separation, non-convergence, positivity) are kept apart because the CLI
maps them to different exit codes.
"""


class DrImputeError(Exception):
    """Base class for all package errors."""


class DataError(DrImputeError, ValueError):
    """Input data or schema is invalid."""


class NonMonotoneError(DataError):
    def __init__(self, subjects):
        self.subjects = list(subjects)
        n = len(self.subjects)
        noun = "subject" if n == 1 else "subjects"
        shown = ", ".join(str(s) for s in self.subjects[:10])
        super().__init__(f"non-monotone, {n} {noun}: {shown}")


class FitError(DrImputeError, RuntimeError):
    """A model could not be fitted."""


class SeparationError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class PositivityError(FitError):
    def __init__(self, subjects, eps):
        self.subjects = list(subjects)
        self.eps = eps
        shown = ", ".join(str(s) for s in self.subjects[:10])
        super().__init__(
            f"positivity violation: {len(self.subjects)} subject(s) with "
            f"pi_hat < {eps} at an observed visit: {shown}"
        )
