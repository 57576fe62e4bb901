"""Circulations around the holes and the outer curve.

The circulation of hole ``i`` obeys ``C_i' = -oint omega g ds``: on a source
the integrand uses the prescribed inflow vorticity ``omega_plus``, on a sink
the outflow trace ``omega_minus``.  The circulation of the outer curve is
constant (Kelvin) and the total vorticity equals the sum of all
circulations.  Tangents keep the fluid on their left (see
:mod:`sinkflow.domain`).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .domain import BoundaryComponent, BoundaryTrace, Kind, ScalarField, VectorField, sample_to_boundary


@dataclass(frozen=True)
class CirculationState:
    """Hole circulations ``C`` (one per hole), outer circulation and time."""

    C: np.ndarray
    C_outer: float
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "C", np.asarray(self.C, dtype=float))
        if not (np.all(np.isfinite(self.C)) and np.isfinite(self.C_outer)):
            raise ValueError("circulations must be finite")

    @property
    def total(self) -> float:
        return float(self.C_outer + self.C.sum())


def initial_circulations(omega_in: ScalarField, C_in, t: float = 0.0) -> CirculationState:
    """Set ``C_outer`` so that ``int omega = C_outer + sum C_i`` holds exactly."""
    C_in = np.asarray(C_in, dtype=float)
    return CirculationState(C_in, omega_in.integral() - float(C_in.sum()), t)


def measure_circulation(v: VectorField, component: BoundaryComponent) -> float:
    """Quadrature of ``v . tau`` along ``component`` (traces extrapolated from cells)."""
    d = v.domain
    vx = sample_to_boundary(ScalarField(d, v.x), component).values
    vy = sample_to_boundary(ScalarField(d, v.y), component).values
    t = component.tangents
    return float(np.dot(vx * t[:, 0] + vy * t[:, 1], component.weights))


def circulation_rhs(g: BoundaryTrace, omega_trace: BoundaryTrace, component: BoundaryComponent) -> float:
    """``-oint omega g ds`` on one component."""
    if g.values.shape != omega_trace.values.shape:
        raise ValueError("traces live on different quadrature rules")
    return -float(np.dot(omega_trace.values * g.values, component.weights))


def _rhs_all(domain, g, plus, minus):
    out = np.zeros(domain.n_holes)
    for comp in domain.holes:
        tr = plus.get(comp.id) if comp.kind == Kind.SOURCE else minus.get(comp.id)
        gg = g.get(comp.id)
        if tr is None or gg is None:
            continue
        out[comp.id - 1] = circulation_rhs(gg, tr, comp)
    return out


def _by_id(traces):
    if traces is None:
        return {}
    if isinstance(traces, dict):
        return traces
    return {t.component: t for t in traces}


def advance_circulations(state: CirculationState, domain, dt: float, g, omega_plus, omega_minus
                         ) -> CirculationState:
    """Trapezoidal update of the hole circulations over one step.

    Parameters
    ----------
    g, omega_plus, omega_minus : pair of trace collections
        Each argument is ``(at_t, at_t_plus_dt)``; a collection is a list of
        BoundaryTrace or a dict keyed by component id.  Sources read
        ``omega_plus``, sinks read ``omega_minus``; the outer circulation is
        copied unchanged.
    """
    r0 = _rhs_all(domain, _by_id(g[0]), _by_id(omega_plus[0]), _by_id(omega_minus[0]))
    r1 = _rhs_all(domain, _by_id(g[1]), _by_id(omega_plus[1]), _by_id(omega_minus[1]))
    return replace(state, C=state.C + 0.5 * dt * (r0 + r1), t=state.t + dt)


def total_vorticity_residual(omega: ScalarField, state: CirculationState) -> float:
    """``int omega - C_outer - sum C_i``."""
    return omega.integral() - state.C_outer - float(state.C.sum())


def total_vorticity_check(record, t: float | None = None) -> float:
    """Total-vorticity residual of a run record at time ``t`` (default: final)."""
    k = len(record.times) - 1 if t is None else record.index_of(t)
    omega = ScalarField(record.domain, record.omega[k])
    return omega.integral() - record.C_outer - float(record.C[k].sum())
