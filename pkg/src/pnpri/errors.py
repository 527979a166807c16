"""Exception types raised across the package.

Invalid arguments raise plain :class:`ValueError`; the classes below mark
failure modes callers usually want to handle separately.
"""


class FormatError(ValueError):
    """A binary or text file does not match its declared format."""


class NoRootError(ValueError):
    """The exponentiation-factor equation has no root in the search bracket."""


class EmptyCoverageError(ValueError):
    """Every uv sample fell outside the representable frequency band."""


class ConvergenceError(RuntimeError):
    """An iterative estimate did not converge within its iteration budget.

    The best estimate reached so far is kept in ``estimate``.
    """

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class DivergenceError(RuntimeError):
    """A solver produced a non-finite iterate."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class CertificationError(RuntimeError):
    """Power iteration on a denoiser Jacobian produced non-finite values."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss or iterate; ``state`` holds a dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
