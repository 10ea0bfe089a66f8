"""Error hierarchy; each family carries the CLI exit code it maps to."""


class AoptError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ValidationError(AoptError, ValueError):
    """Input, configuration or admissibility problem (exit code 2)"""
    exit_code = 2


class ConfigurationError(ValidationError):
    pass


class InadmissibleProfile(ValidationError):
    pass


class TraceViolation(ValidationError):
    pass


class GridTooCoarse(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class UnknownEdge(ValidationError):
    pass


class UnsupportedAbsorbingCoefficients(ValidationError):
    pass


class SolverError(AoptError):
    """A numerical solve failed (exit code 3)"""
    exit_code = 3


class SingularSystem(SolverError):
    pass


class NonDegeneracyViolated(SolverError):
    """1 - 2k(pbar + ptil) dropped to or below the guard threshold"""

    def __init__(self, margin: float, guard: float, step: int = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"Non-degeneracy violated{where}: min(1 - 2k(pbar+ptil)) = {margin:.6g} <= {guard:.6g}"
        )
        self.margin = margin
        self.guard = guard
        self.step = step


class NewtonDiverged(SolverError):
    pass


class LineSearchStalled(SolverError):
    pass


class CheckFailure(AoptError):
    """A verification command exceeded its tolerance (exit code 4)"""
    exit_code = 4


class StepTooLarge(UserWarning):
    """Linear step residual above tolerance; the time step is likely too large"""
