"""Exception hierarchy shared by the numerics, the harness and the service layer."""
from typing import Optional, Sequence


class TiltRopterError(Exception):
    """Base class for every error raised by the tiltropter package."""


class InvalidArgumentError(TiltRopterError, ValueError):
    """An argument violates a documented precondition (non-unit quaternion, bad dt, ...)."""


class ParameterError(InvalidArgumentError):
    """A vehicle parameter set fails validation."""


class AllocationRankError(ParameterError):
    """The rotor geometry yields an allocation matrix of rank < 6."""

    def __init__(self, rank: int, deficient_directions: Sequence[str]):
        self.rank = rank
        self.deficient_directions = list(deficient_directions)
        super().__init__(
            f"Allocation matrix has rank {rank} < 6; "
            f"uncontrollable wrench directions: {', '.join(self.deficient_directions)}"
        )


class SingularConfigurationError(TiltRopterError, ArithmeticError):
    """Servo rate requested at (near) zero rotor thrust."""

    def __init__(self, rotor: int, thrust: float):
        self.rotor = rotor
        self.thrust = thrust
        super().__init__(f"Rotor {rotor + 1} thrust {thrust:.3e} N is below the servo-rate threshold")


class SimulationDivergedError(TiltRopterError, RuntimeError):
    """The plant state became non-finite; `last_valid_state` holds the last finite snapshot."""

    def __init__(self, t: float, last_valid_state: Optional[object] = None):
        self.t = t
        self.last_valid_state = last_valid_state
        super().__init__(f"Simulation diverged at t={t:.4f} s")


class IdentificationError(TiltRopterError, ValueError):
    """Servo identification dataset is invalid or carries no excitation."""


class PlanningError(TiltRopterError, ValueError):
    """A reference trajectory cannot be parameterized within its limits."""


class SolverError(TiltRopterError, RuntimeError):
    """The NMPC quadratic subproblem failed even after constraint relaxation."""
