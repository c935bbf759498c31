"""Exception hierarchy shared by all solver modules."""


class BallisticError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(BallisticError, ValueError):
    """Input failed a precondition check."""


class NegativeWeight(ValidationError):
    pass


class ZeroMass(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class AsymmetricGrid(ValidationError):
    pass


class VelocityOutOfRange(ValidationError):
    pass


class NonFiniteData(ValidationError):
    pass


class CFLViolation(ValidationError):
    """Explicit time step too large for a monotone update."""

    def __init__(self, dt, dt_max):
        super().__init__(f"time step {dt:.3e} exceeds stability bound {dt_max:.3e}")
        self.dt = dt
        self.required_dt = dt_max


class SolverFailure(BallisticError, RuntimeError):
    pass


class KernelUnderflow(SolverFailure):
    pass


class FlaggedEnsemble(SolverFailure):
    """Too many simulated paths left the grid hull."""
