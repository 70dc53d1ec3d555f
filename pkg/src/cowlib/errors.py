"""Exception types shared across the package."""


class CowlibError(Exception):
    """Base class for all errors raised by cowlib."""


class IntegrationError(CowlibError):
    """Adaptive quadrature failed to reach the requested tolerance.

    Carries the best estimate obtained so far in ``estimate`` and the
    estimated absolute error in ``error``.
    """

    def __init__(self, message, estimate, error):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class ConstructionError(CowlibError):
    """Invalid parameters when building a density or model."""


class SingularModelError(CowlibError):
    """The component densities are (numerically) linearly dependent."""


class IllConditionedBasisError(CowlibError):
    """The W matrix of a COW basis is too ill-conditioned to invert."""


class EvaluationError(CowlibError):
    """A weight or density evaluation hit an invalid point."""


class NonConvergenceError(CowlibError):
    """An iterative procedure failed to converge.

    ``trace`` holds the iteration history when available.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
