"""Exception types shared across the package."""


class SingularSystemError(ValueError):
    """A least-squares design matrix is rank deficient."""


class OutOfRangeError(ValueError):
    """A frequency or flux value lies outside the attainable band.

    ``index`` is the offending sample index when one applies.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConvergenceError(RuntimeError):
    """Nonlinear fit did not converge; carries the best iterate."""

    def __init__(self, message, best=None, rms_residual=None):
        super().__init__(message)
        self.best = best
        self.rms_residual = rms_residual


class IdentifiabilityError(ValueError):
    """Data does not constrain the fit parameters."""


class ConfigError(ValueError):
    """Invalid pipeline configuration."""
