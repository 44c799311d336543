"""Exception types raised across the package."""


class KLevelError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KLevelError, ValueError):
    """Argument has the wrong shape, range or type."""


class NumericError(KLevelError, FloatingPointError):
    """A computation produced a non-finite value.

    ``level`` is the 1-based level where it happened, when known.
    """

    def __init__(self, message, level=None):
        if level is not None:
            message = f"{message} (level {level})"
        super().__init__(message)
        self.level = level


class ConfigurationError(KLevelError):
    """The problem or run is missing something it needs."""


class RunError(KLevelError):
    """An optimizer run diverged or failed at a given iteration."""

    def __init__(self, message, iteration=None, seed=None, trajectory=None):
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if seed is not None:
            parts.append(f"seed={seed}")
        if trajectory is not None:
            parts.append(f"trajectory={trajectory}")
        super().__init__(" ".join(parts))
        self.message = message
        self.iteration = iteration
        self.seed = seed
        self.trajectory = trajectory


class OracleNotConvergedError(KLevelError):
    """Reference minimizer did not reach its gradient tolerance."""

    def __init__(self, grad_norm, tol):
        super().__init__(f"reference run stopped at |grad|={grad_norm:.3e} > tol={tol:.1e}")
        self.grad_norm = grad_norm
        self.tol = tol
