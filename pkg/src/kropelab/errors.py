"""Exception types raised across the package."""


class KropeLabError(Exception):
    """Base class for all package errors."""


class DimensionError(KropeLabError, ValueError):
    """Array shapes are inconsistent."""


class ValidationError(KropeLabError, ValueError):
    """An input violates a documented invariant."""


class ParameterError(KropeLabError, ValueError):
    """A configuration parameter is out of range or unknown."""


class DegenerateRangeError(ParameterError):
    """Reward bounds collapse to a single value."""


class SingularSystemError(KropeLabError, ArithmeticError):
    """A linear system has no unique solution."""


class ConvergenceError(KropeLabError, RuntimeError):
    """An iterative procedure exhausted its iteration budget."""


class RankDeficiencyWarning(UserWarning):
    """A least-squares system was rank deficient at the pseudo-inverse cutoff."""
