"""Exception taxonomy shared across the package."""


class ResidualRLError(Exception):
    """Base class for errors raised by this package."""


class EmptySupportError(ResidualRLError):
    """A scenario set or residual set has no atoms (empty-support)."""


class StateOutOfBoundsError(ResidualRLError):
    """A state lies outside the feasible box (state-out-of-bounds)."""


class NumericBlowupError(ResidualRLError):
    """A state, parameter, or loss became non-finite (numeric-blowup)."""


class SingularDesignError(ResidualRLError):
    """Normal equations are singular at the requested ridge (singular-design)."""


class NanGradientError(ResidualRLError):
    """A gradient became non-finite during optimization (nan-gradient)."""


class NonConvergenceError(ResidualRLError):
    """Fixed-point iteration hit max_iter before reaching tol (non-convergence)."""

    def __init__(self, msg: str, iterations: int = 0, last_delta: float = float("nan")):
        super().__init__(msg)
        self.iterations = iterations
        self.last_delta = last_delta


class ConfigError(ResidualRLError):
    """Invalid configuration value or unknown configuration key."""
