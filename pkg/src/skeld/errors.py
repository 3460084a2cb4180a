"""Exception hierarchy shared by the solvers and the CLI."""


class SkeldError(Exception):
    """Base class for every error raised by skeld."""


class DomainError(SkeldError, ValueError):
    """Argument outside the domain of a scalar function (e.g. negative density)."""


class SingularityError(SkeldError, ArithmeticError):
    """A derivative was requested at a point where it is infinite."""


class InvalidNonlinearity(SkeldError, ValueError):
    pass


class ResolutionError(SkeldError, ValueError):
    """Mode or rescaled field not representable on the grid (aliasing guard)."""


class GridMismatch(SkeldError, ValueError):
    pass


class NumericalFailure(SkeldError, RuntimeError):
    """Newton divergence, nonnegativity loss or linear-solver stagnation."""

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details


class NonnegativityFailure(NumericalFailure):
    pass


class NewtonFailure(NumericalFailure):
    pass


class SolverError(NumericalFailure):
    """Inner linear solve (CG) did not converge."""


class InfeasibleProblem(SkeldError, ValueError):
    """E.g. endpoint target with a different mass than the initial datum."""


class ConfigError(SkeldError, ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
