"""Exception types shared across the package."""


class HJError(Exception):
    """Base class for all package errors."""


class InvalidSpec(HJError, ValueError):
    """Problem data violates a structural hypothesis.

    ``hypothesis`` carries the short label of the violated condition so
    that command-line tools can report it verbatim.
    """

    def __init__(self, message, hypothesis=None):
        self.hypothesis = hypothesis
        if hypothesis:
            message = f"{message} ({hypothesis})"
        super().__init__(message)


class NonConvergence(HJError, RuntimeError):
    """Newton or policy iteration stopped before reaching tolerance."""

    def __init__(self, message, iterations=None, residual=None):
        self.iterations = iterations
        self.residual = residual
        super().__init__(message)


class SingularJacobian(HJError, RuntimeError):
    """The linearized operator could not be factorized."""


class MismatchedPair(HJError, ValueError):
    """An adjoint solution was paired with a result it was not built from."""


class InvalidStart(HJError, ValueError):
    """Starting point of a stochastic simulation is not interior."""


class StabilityViolation(HJError, ValueError):
    """Requested time step exceeds the diffusion guard of the grid."""


class AllZeroErrors(HJError, ValueError):
    """Rate fit requested on data without two strictly positive errors."""


class ConfigError(HJError, ValueError):
    """Malformed configuration file."""
