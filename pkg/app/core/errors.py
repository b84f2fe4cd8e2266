"""Domain errors shared by the services, the CLI runner and the HTTP API.

Every error carries the CLI exit code and the HTTP status code it maps to.
"""


class RobinToolkitError(Exception):
    exit_code: int = 2
    status_code: int = 500


# ─── Configuration ──────────────────────────────────────────────────

class ConfigError(RobinToolkitError, ValueError):
    exit_code = 1
    status_code = 422


# ─── Solver failures ────────────────────────────────────────────────

class SolverError(RobinToolkitError):
    exit_code = 2
    status_code = 500


class SingularSystemError(SolverError):
    pass


class SolverConvergenceError(SolverError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (achieved relative residual {residual:.3e})")
        self.residual = residual


class EigenConvergenceError(SolverError):
    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class StepFailureError(SolverError):
    def __init__(self, step: int, residual: float):
        super().__init__(f"time step {step} failed (relative residual {residual:.3e})")
        self.step = step
        self.residual = residual


# ─── Invariant violations ───────────────────────────────────────────

class InvariantViolation(RobinToolkitError):
    exit_code = 3
    status_code = 500
    invariant: str = "unspecified"

    def __init__(self, message: str, invariant: str = None):
        if invariant is not None:
            self.invariant = invariant
        super().__init__(f"[{self.invariant}] {message}")


class PreconditionError(InvariantViolation, ValueError):
    invariant = "precondition"


class MeshValidationError(InvariantViolation):
    invariant = "mesh"


class RobinBoundError(InvariantViolation):
    invariant = "robin_lower_bound"


class CarlemanSignError(InvariantViolation):
    invariant = "carleman_weight_sign"


class EnergyIdentityError(InvariantViolation):
    invariant = "energy_identity"


class EmptyCompactSetError(InvariantViolation):
    invariant = "nonempty_K"


class CompactSetContractError(InvariantViolation):
    invariant = "K_threshold"


class FluxTooSmallError(InvariantViolation):
    invariant = "normal_flux_lower_bound"


class InsufficientDecayError(InvariantViolation):
    invariant = "decay_dynamic_range"


class FitFailureError(InvariantViolation):
    invariant = "log_law_fit"
