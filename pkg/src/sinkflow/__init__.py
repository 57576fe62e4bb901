"""sinkflow: 2D incompressible Euler flows with sources and sinks in vorticity form.

Modules
-------
domain
    Geometry, cut-cell grid, fields and boundary traces.
elliptic
    Dirichlet solves, harmonic basis, potential lift and Biot-Savart velocity.
transport
    Viscous finite-volume and inviscid semi-Lagrangian steppers, adjoint transport.
circulation
    Circulation bookkeeping and the total-vorticity identity.
weakform
    Weak-formulation residuals, the symmetrized kernel and duality.
analysis
    L^p and gauge budgets, maximum principle, uniform integrability, viscosity sweeps.
cli
    Command line front end.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    AssertionFailed,
    ParseError,
    SinkflowError,
    SolverError,
    ValidationError,
)
from .scenario import Scenario, parse_scenario, reference_scenario, zero_scenario  # noqa: E402

__all__ = [
    "__version__",
    "AssertionFailed",
    "ParseError",
    "SinkflowError",
    "SolverError",
    "ValidationError",
    "Scenario",
    "parse_scenario",
    "reference_scenario",
    "zero_scenario",
]
