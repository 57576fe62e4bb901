"""Exception hierarchy shared by all modules.

Every error raised on purpose by the package derives from
:class:`SinkflowError`.  The command line front end maps the four families
below onto its exit codes (parse, validation, solver, assertion).
"""


class SinkflowError(Exception):
    """Base class for all package errors."""


# --- input and geometry -------------------------------------------------------


class ParseError(SinkflowError):
    """A scenario file could not be read.  Carries line/field information."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


class ValidationError(SinkflowError):
    """Scenario data violate a source-sink compatibility or input condition."""


class GeometryError(ValidationError):
    """Invalid hole layout or a grid too coarse to resolve the gaps."""


class CompatibilityError(ValidationError):
    """Neumann data with non-zero total flux."""


class PointOutsideFluid(ValidationError):
    """A point expected inside the fluid region lies outside of it."""


class CoincidentPoints(ValidationError):
    """A two-point kernel was evaluated on the diagonal."""


class NotC0TestFunction(ValidationError):
    """A test function is not constant on every boundary component."""


class NonConvexGauge(ValidationError):
    """A gauge function failed the numerical convexity probe."""


class IncompleteRecord(ValidationError):
    """A run record does not cover the requested time interval."""


# --- numerical failures ----------------------------------------------------------


class SolverError(SinkflowError):
    """A linear solve failed or missed its residual tolerance."""


class SingularMatrixError(SolverError):
    """The period matrix (or another small system) is numerically singular."""


class ExtrapolationError(SolverError):
    """Too few fluid cells around a boundary point to extrapolate a trace."""


class CFLViolation(SolverError):
    """A time step exceeds the stability bound of the stepper."""


class NonFiniteField(SolverError):
    """A field acquired NaN or infinite values."""


class TrajectoryStall(SolverError):
    """A backward characteristic left the fluid through an outflow boundary."""


# --- verification outcomes ---------------------------------------------------------


class AssertionFailed(SinkflowError):
    """A configured verification check did not pass."""


class NotUniformlyIntegrable(AssertionFailed):
    """A function family fails the tail-mass probe."""


class HypothesisViolated(AssertionFailed):
    """The weights of a weighted integrability check concentrate at zero."""
