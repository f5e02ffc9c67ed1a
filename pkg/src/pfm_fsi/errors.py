"""Exception and warning types raised by the solver."""


class SimulationError(Exception):
    """Base class for numerical failures that abort a run."""


class OutOfDomain(SimulationError):
    """A query position lies outside the region where a stencil is defined."""


class SolverDiverged(SimulationError):
    """The pressure solve did not reach its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class UnstableSubstep(SimulationError):
    """An explicit solid substep blew up."""

    def __init__(self, message, suggested_dt=None):
        super().__init__(message)
        self.suggested_dt = suggested_dt


class NoShedding(Exception):
    """A probe signal has no dominant oscillation."""


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class UnderResolved(UserWarning):
    """Faces inside the fluid received no particle weight."""


class InvertedElement(UserWarning):
    """A solid particle's elastic deformation gradient lost positive determinant."""
