"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of a function."""


class InfiniteSampleSizeError(ValueError):
    """The planning alternative is not inside H1, so no finite sample size reaches the target power."""


class IntegrationError(RuntimeError):
    """Adaptive quadrature did not reach the requested tolerance.

    Attributes
    ----------
    estimate : float
        Best value of the integral reached before giving up.
    error : float
        Error estimate attached to ``estimate``.
    """

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(f"{message} (estimate={estimate!r}, error={error:.3g})")
        self.estimate = estimate
        self.error = error


class RootFindingError(RuntimeError):
    """No sign change could be bracketed."""


class UndefinedFactorError(ValueError):
    """The inflation factor cannot be computed because the pilot already covers the fixed-design size."""
