"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid physical or numerical parameters (rejected before computing)."""


class DomainError(ValueError):
    """A function was evaluated outside its domain, e.g. inside the horizon."""


class ConvergenceError(RuntimeError):
    """An iterative procedure failed to reach its tolerance."""
