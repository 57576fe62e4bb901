"""Vorticity transport: viscous finite volumes, semi-Lagrangian advection, adjoint.

The velocity is rebuilt at every stage from the vorticity, the circulations
and the boundary fluxes,

    v = e(t) v_g + sum_i C_i X_i + K_H[omega],

and enters the transport schemes through its exact face fluxes (differences
of the stream function), so the discrete divergence of every merged cell is
zero to round-off.  Consequences: constants are preserved exactly and the
total vorticity changes only through the boundary.

Viscous stepper
    Conservative finite volumes on the merged cells.  Advective face values
    use MUSCL reconstruction with the monotonized central limiter on regular
    faces and first-order upwinding elsewhere; diffusion is the two-point
    flux ``nu A (omega_b - omega_a) / d``.  The Robin condition
    ``nu d_n omega = (omega - omega_plus) g`` on sources makes the total
    boundary flux there equal to ``g omega_plus``; on sinks and on the outer
    wall the diffusive flux vanishes and the advective one is upwinded.
    Time stepping is Heun's method (SSP-RK2).

Semi-Lagrangian stepper
    Backward RK2 characteristics with biquadratic interpolation, clipped to
    the range of the fluid values in the stencil.  Characteristics that
    enter through a source pick up ``omega_plus`` at the crossing point and
    time.  Characteristics traced back through a sink are counted and filled
    by limited extrapolation.

Adjoint
    The backward problem ``-d_t phi - v . grad phi - nu Lap phi = chi`` is
    solved with the same schemes on the reversed flow; its inflow boundary
    is the set of sinks, where ``Psi`` is imposed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, sparse

from . import elliptic as ell
from .circulation import CirculationState, initial_circulations
from .domain import (BoundaryTrace, Domain, Kind, ScalarField, VectorField, _trace_operator, build_domain,
                     ls_weights, ray_hits, sample_to_boundary)
from .errors import CFLViolation, ExtrapolationError, IncompleteRecord, NonFiniteField

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# velocity model
# ---------------------------------------------------------------------------


@dataclass
class Flow:
    """Velocity at one time level in all the forms the schemes use.

    ``F`` are face fluxes (``a`` to ``b`` positive), ``arcs`` the outflow
    through every boundary arc of :func:`sinkflow.elliptic.boundary_arcs`, and
    ``v`` the cell-centred field.
    """

    t: float
    F: np.ndarray
    arcs: list
    v: VectorField
    e: float = 1.0

    def reversed(self) -> "Flow":
        return Flow(self.t, -self.F, [-a for a in self.arcs], self.v * -1.0, self.e)


class FlowModel:
    """Data and cached operators shared by all steps of a run.

    Parameters
    ----------
    domain : Domain
    g_shape : list of BoundaryTrace
        Boundary fluxes at unit envelope.
    envelope : callable
        ``t -> e(t) > 0``.
    omega_plus : callable
        ``(component_id, points, t) -> values`` on sources.
    basis : HarmonicBasis, optional
    """

    def __init__(self, domain: Domain, g_shape, envelope, omega_plus, basis=None):
        self.domain = domain
        self.basis = basis if basis is not None else ell.harmonic_basis(domain)
        self.g_shape = {t.component: t for t in g_shape}
        self.envelope = envelope
        self.omega_plus = omega_plus
        self.lift = ell.potential_lift_data(domain, list(g_shape), self.basis) if g_shape else None
        N = domain.n_holes
        self._X = [ell.harmonic_stream(domain, self.basis, i) for i in range(N)]

    @classmethod
    def from_scenario(cls, scenario, domain: Domain | None = None):
        domain = domain if domain is not None else build_domain(scenario.spec)
        return cls(domain, scenario.g_shape(domain), scenario.envelope_at, scenario.omega_plus_points)

    # boundary data -------------------------------------------------------------
    def g_traces(self, t: float) -> dict:
        e = float(self.envelope(t))
        return {k: BoundaryTrace(k, e * tr.values, t) for k, tr in self.g_shape.items()}

    def omega_plus_traces(self, t: float) -> dict:
        return {c.id: BoundaryTrace(c.id, self.omega_plus(c.id, c.points, t), t) for c in self.domain.sources}

    # velocity ---------------------------------------------------------------------
    def flow(self, omega: np.ndarray, C, t: float) -> Flow:
        d = self.domain
        psi, consts = ell.biot_savart_stream(d, np.asarray(omega, float), self.basis)
        for c, (p, k) in zip(np.asarray(C, float), self._X):
            psi = psi + c * p
            consts = consts + c * k
        F = ell.stream_face_fluxes(d, psi, consts=consts)
        arcs = ell.arc_outflow(d, list(consts), np.zeros(d.n_holes))
        v = ell._perp_grad(d, psi, consts)
        e = float(self.envelope(t))
        if self.lift is not None:
            Fg, Ag = self.lift.scaled(e)
            F = F + Fg
            arcs = [a + b for a, b in zip(arcs, Ag)]
            v = v + self.lift.v * e
        return Flow(t, F, arcs, v, e)


# ---------------------------------------------------------------------------
# states and records
# ---------------------------------------------------------------------------


@dataclass
class FlowState:
    """Solution at one time level.

    ``flow`` caches the discrete velocity (face and arc fluxes) consistent
    with ``(omega, circulations, g)``; ``v`` is its cell-centred form.
    """

    t: float
    omega: ScalarField
    v: VectorField
    circulations: CirculationState
    g: dict
    omega_plus: dict
    flow: Flow | None = field(default=None, repr=False)

    @property
    def domain(self) -> Domain:
        return self.omega.domain


def initial_state(model: FlowModel, omega_in: ScalarField, C_in, t: float = 0.0) -> FlowState:
    """State at ``t`` from ``(omega_in, C_in)``; ``C_outer`` closes the total vorticity."""
    circ = initial_circulations(omega_in, C_in, t)
    flow = model.flow(omega_in.values, circ.C, t)
    return FlowState(t, omega_in, flow.v, circ, model.g_traces(t), model.omega_plus_traces(t), flow)


@dataclass
class RunRecord:
    """Time history of a run.

    Every field is stored at every step (index ``k`` corresponds to
    ``times[k]``); ``stride`` only thins exported snapshot files.

    Attributes
    ----------
    omega : ndarray, shape (n_steps + 1, n_fluid)
    C : ndarray, shape (n_steps + 1, N)
    omega_minus, omega_plus, g : dict
        Per component id, arrays of shape ``(n_steps + 1, n_q)``.
    mass_ledger : ndarray
        Per step: discrete change of ``int omega`` minus the boundary
        quadrature ``-oint_sinks g omega_minus + oint_sources (-g) omega_plus``
        (trapezoidal in time), divided by ``dt``.
    stalls : ndarray of int
        Semi-Lagrangian characteristics traced back through a sink, per step.
    failure : str or None
        Set when the run stopped early; the record then ends at the last good step.
    """

    scenario_id: str
    nu: float
    domain: Domain
    model: FlowModel = field(repr=False)
    times: np.ndarray
    omega: np.ndarray
    C: np.ndarray
    C_outer: float
    dt: np.ndarray
    omega_minus: dict
    omega_plus: dict
    g: dict
    mass_ledger: np.ndarray
    stalls: np.ndarray
    stride: int = 1
    failure: str | None = None

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def omega_in(self) -> ScalarField:
        return ScalarField(self.domain, self.omega[0])

    def omega_at(self, k: int) -> ScalarField:
        return ScalarField(self.domain, self.omega[k])

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise IncompleteRecord(f"no snapshot at t={t}")
        return k

    def flow_at(self, k: int) -> Flow:
        """Velocity of step ``k`` rebuilt from the stored state."""
        return self.model.flow(self.omega[k], self.C[k], float(self.times[k]))

    def time_weights(self) -> np.ndarray:
        """Trapezoidal weights on the (possibly non-uniform) time grid."""
        w = np.zeros(len(self.times))
        dt = np.diff(self.times)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
        return w

    @property
    def snapshot_indices(self) -> np.ndarray:
        idx = np.arange(0, len(self.times), self.stride)
        if idx[-1] != len(self.times) - 1:
            idx = np.append(idx, len(self.times) - 1)
        return idx


# ---------------------------------------------------------------------------
# time step
# ---------------------------------------------------------------------------


def stable_dt(state, nu: float, dt_max: float = 0.05) -> float:
    """``0.5 * min(h / max|v|, h^2 / (4 nu), dt_max)``.

    ``state`` is a FlowState or anything with ``v`` (a VectorField) and a
    domain; infinite bounds are dropped.
    """
    v = state.v
    h = v.domain.h
    vmax = float(np.max(v.magnitude)) if v.x.size else 0.0
    if not np.isfinite(vmax):
        raise NonFiniteField("velocity is not finite")
    adv = h / vmax if vmax > 0 else math.inf
    dif = h * h / (4 * nu) if nu > 0 else math.inf
    return 0.5 * min(adv, dif, dt_max)


def positivity_dt(domain: Domain, flow: Flow, nu: float, safety: float = 0.4) -> float:
    """Largest step keeping every cell update a convex combination.

    Uses the outflow of each merged cell (faces and arcs) and the diffusive
    conductances; cut cells with small volumes are what make this bound
    stricter than :func:`stable_dt`.
    """
    ops = _fv_ops(domain)
    f = domain.faces
    out = np.zeros(domain.n_fluid)
    F = flow.F
    np.add.at(out, f.a, np.maximum(F, 0.0) + nu * ops.cond)
    np.add.at(out, f.b, np.maximum(-F, 0.0) + nu * ops.cond)
    for arcs, G in zip(ell.boundary_arcs(domain), flow.arcs):
        np.add.at(out, arcs.cell, np.abs(G))
    rate = np.max(out / domain.volumes)
    return safety / rate if rate > 0 else math.inf


# ---------------------------------------------------------------------------
# finite-volume operator
# ---------------------------------------------------------------------------


@dataclass
class _FVOps:
    cond: np.ndarray  # A_f / d_f
    reg_a: np.ndarray  # regular faces with an upstream neighbour of a
    reg_b: np.ndarray
    arcs: list


def _fv_ops(domain: Domain) -> _FVOps:
    key = "fv_ops"
    if key not in domain._cache:
        f = domain.faces
        d = np.abs(domain.centers[f.b, f.orient] - domain.centers[f.a, f.orient])
        d = np.maximum(d, 0.5 * domain.h)
        cond = f.aperture / d
        reg_a = np.flatnonzero(f.regular & (f.far_a >= 0))
        reg_b = np.flatnonzero(f.regular & (f.far_b >= 0))
        domain._cache[key] = _FVOps(cond, reg_a, reg_b, ell.boundary_arcs(domain))
    return domain._cache[key]


def _mc(p, q):
    s = np.sign(p)
    m = np.minimum(np.minimum(2 * np.abs(p), 2 * np.abs(q)), 0.5 * np.abs(p + q))
    return np.where(p * q > 0, s * m, 0.0)


def _fv_rhs(domain: Domain, w: np.ndarray, flow: Flow, nu: float, inflow: dict, inflow_kind: Kind,
            source=None) -> np.ndarray:
    """``d(V w)/dt`` of the conservative scheme.

    ``inflow`` maps component id to a callable ``(points) -> values`` giving the
    boundary value carried in through arcs of kind ``inflow_kind``.
    """
    ops = _fv_ops(domain)
    f = domain.faces
    F = flow.F
    wa, wb = w[f.a], w[f.b]
    val_p = wa.copy()
    val_m = wb.copy()
    ra, rb = ops.reg_a, ops.reg_b
    val_p[ra] = wa[ra] + 0.5 * _mc(wa[ra] - w[f.far_a[ra]], wb[ra] - wa[ra])
    val_m[rb] = wb[rb] - 0.5 * _mc(wb[rb] - wa[rb], w[f.far_b[rb]] - wb[rb])
    flux = np.where(F >= 0, F * val_p, F * val_m)
    if nu > 0:
        flux = flux - nu * ops.cond * (wb - wa)
    r = np.zeros(domain.n_fluid)
    np.subtract.at(r, f.a, flux)
    np.add.at(r, f.b, flux)
    for arcs, G in zip(ops.arcs, flow.arcs):
        comp = domain.components[arcs.component]
        if comp.kind == inflow_kind and arcs.component in inflow:
            bv = inflow[arcs.component](arcs.mid)
            fl = np.where(G < 0, G * bv, G * w[arcs.cell])
        else:
            fl = G * w[arcs.cell]
        np.subtract.at(r, arcs.cell, fl)
    if source is not None:
        r = r + domain.volumes * source
    return r


def _boundary_rate(domain: Domain, g: dict, omega_plus: dict, omega_minus: dict) -> float:
    """``-oint_sinks g omega_minus + oint_sources (-g) omega_plus`` by quadrature."""
    tot = 0.0
    for c in domain.holes:
        tr = omega_plus.get(c.id) if c.kind == Kind.SOURCE else omega_minus.get(c.id)
        if tr is None or c.id not in g:
            continue
        tot -= float(np.dot(g[c.id].values * tr.values, c.weights))
    return tot


def trace_outflow(state: FlowState) -> dict:
    """Range-limited traces of ``omega`` on every sink, keyed by component id."""
    d = state.domain
    return {c.id: sample_to_boundary(state.omega, c, limit=True, time=state.t) for c in d.sinks}


def _circ_rates(domain, g, plus, minus):
    out = np.zeros(domain.n_holes)
    for c in domain.holes:
        tr = plus.get(c.id) if c.kind == Kind.SOURCE else minus.get(c.id)
        if tr is None or c.id not in g:
            continue
        out[c.id - 1] = -float(np.dot(tr.values * g[c.id].values, c.weights))
    return out


def _sink_flux_rates(domain: Domain, flow: Flow, w: np.ndarray, rates: np.ndarray) -> np.ndarray:
    """Replace the sink entries of ``rates`` by the scheme's own outflow ``-sum_arcs G w_cell``.

    This is the arc quadrature of ``-oint g omega_minus`` that the
    finite-volume update removes from the cells, so circulations and
    ``int omega`` exchange exactly the same amount through every sink.
    """
    out = rates.copy()
    for arcs, G in zip(ell.boundary_arcs(domain), flow.arcs):
        comp = domain.components[arcs.component]
        if comp.kind == Kind.SINK:
            out[comp.id - 1] = -float(np.sum(G * w[arcs.cell]))
    return out


def _check_finite(w):
    if not np.all(np.isfinite(w)):
        raise NonFiniteField("vorticity became non-finite")


def viscous_step(state: FlowState, nu: float, dt: float, model: FlowModel) -> FlowState:
    """One Heun step of the penalized viscous scheme, circulations included.

    Raises
    ------
    CFLViolation
        If ``dt`` exceeds :func:`positivity_dt` of the current velocity by more
        than 1 percent.
    """
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    d = state.domain
    t0, t1 = state.t, state.t + dt
    flow0 = state.flow if state.flow is not None else model.flow(state.omega.values, state.circulations.C, t0)
    if dt > 1.01 * positivity_dt(d, flow0, nu):
        raise CFLViolation(f"dt={dt:.3g} exceeds the positivity bound {positivity_dt(d, flow0, nu):.3g}")
    V = d.volumes
    w0 = state.omega.values
    C0 = state.circulations.C

    def inflow(t):
        return {c.id: (lambda p, cid=c.id: model.omega_plus(cid, p, t)) for c in d.sources}

    g0, g1 = state.g, model.g_traces(t1)
    p0, p1 = state.omega_plus, model.omega_plus_traces(t1)
    r0 = _sink_flux_rates(d, flow0, w0, _circ_rates(d, g0, p0, {}))

    w1 = w0 + dt * _fv_rhs(d, w0, flow0, nu, inflow(t0), Kind.SOURCE) / V
    C1 = C0 + dt * r0
    flow1 = model.flow(w1, C1, t1)
    w2 = w1 + dt * _fv_rhs(d, w1, flow1, nu, inflow(t1), Kind.SOURCE) / V
    w_new = 0.5 * (w0 + w2)
    _check_finite(w_new)
    r1 = _sink_flux_rates(d, flow1, w1, _circ_rates(d, g1, p1, {}))
    C_new = C0 + 0.5 * dt * (r0 + r1)
    circ = replace(state.circulations, C=C_new, t=t1)
    omega = ScalarField(d, w_new)
    flow = model.flow(w_new, C_new, t1)
    return FlowState(t1, omega, flow.v, circ, g1, p1, flow)


# ---------------------------------------------------------------------------
# semi-Lagrangian machinery
# ---------------------------------------------------------------------------


@dataclass
class _GridOps:
    E: sparse.csr_matrix  # fluid values -> full grid (fluid copies and band extrapolation)
    fluid_mask: np.ndarray
    band: np.ndarray  # flat indices of the band cells
    band_comp: np.ndarray  # nearest boundary curve of each band cell
    band_proj: np.ndarray  # its projection onto that curve (circles) or the cell centre


def _grid_ops(domain: Domain) -> _GridOps:
    """Extension of cell fields to a three-cell band around the fluid."""
    key = "grid_ops"
    if key in domain._cache:
        return domain._cache[key]
    nx, ny = domain.nx, domain.ny
    fluid = domain.fluid_index >= 0
    band = ndimage.binary_dilation(fluid, structure=np.ones((3, 3), bool), iterations=3) & ~fluid
    rows, cols, vals = [], [], []
    fi = np.flatnonzero(fluid.ravel())
    rows.append(fi)
    cols.append(domain.fluid_index.ravel()[fi])
    vals.append(np.ones(len(fi)))
    for i, j in np.argwhere(band):
        p = domain.origin + (np.array([i, j]) + 0.5) * domain.h
        try:
            idx, w = ls_weights(domain, p)
        except ExtrapolationError:
            dist = np.hypot(*(domain.centers - p).T)
            idx, w = np.array([int(np.argmin(dist))]), np.array([1.0])
        rows.append(np.full(len(idx), i * ny + j))
        cols.append(idx)
        vals.append(w)
    E = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nx * ny, domain.n_fluid))
    bij = np.argwhere(band)
    bpts = domain.origin + (bij + 0.5) * domain.h
    _, bcomp = domain.signed_distance(bpts)
    proj = bpts.copy()
    for comp in domain.components:
        sel = bcomp == comp.id
        if comp.is_circle and np.any(sel):
            c = np.asarray(comp.shape.center)
            r = bpts[sel] - c
            proj[sel] = c + comp.shape.radius * r / np.maximum(np.hypot(*r.T), 1e-300)[:, None]
    ops = _GridOps(E, fluid, bij[:, 0] * ny + bij[:, 1], np.asarray(bcomp, int), proj)
    domain._cache[key] = ops
    return ops


def extend_to_grid(f: ScalarField | np.ndarray, domain: Domain | None = None) -> np.ndarray:
    """Cell values on the full ``(nx, ny)`` grid, extrapolated into a band around the fluid."""
    if isinstance(f, ScalarField):
        domain, vals = f.domain, f.values
    else:
        vals = np.asarray(f, float)
    ops = _grid_ops(domain)
    return (ops.E @ vals).reshape(domain.nx, domain.ny)


def _quad_weights(xi):
    return (0.5 * xi * (xi - 1), 1 - xi * xi, 0.5 * xi * (xi + 1))


def interpolate_biquadratic(G: np.ndarray, origin, h: float, pts, *, periodic: bool = False,
                            limit_grid: np.ndarray | None = None, limit: bool = True) -> np.ndarray:
    """Biquadratic Lagrange interpolation of cell-centred grid values.

    Parameters
    ----------
    G : ndarray, shape (nx, ny)
        Values at the centres ``origin + (i + 1/2, j + 1/2) h``.
    periodic : bool
        Wrap indices (periodic test configurations).
    limit_grid : ndarray, optional
        Values used for the range limiter, NaN where a cell must be ignored
        (defaults to ``G``).  With ``limit=True`` the result is clipped to the
        min/max of the nine stencil values of ``limit_grid``.
    """
    pts = np.atleast_2d(np.asarray(pts, float))
    nx, ny = G.shape
    u = (pts - np.asarray(origin)) / h - 0.5
    i0 = np.rint(u).astype(int)
    xi = u - i0
    lx = _quad_weights(xi[:, 0])
    ly = _quad_weights(xi[:, 1])
    out = np.zeros(len(pts))
    L = G if limit_grid is None else limit_grid
    lo = np.full(len(pts), np.inf)
    hi = np.full(len(pts), -np.inf)
    for a in range(3):
        ia = i0[:, 0] + a - 1
        ia = np.mod(ia, nx) if periodic else np.clip(ia, 0, nx - 1)
        for b in range(3):
            jb = i0[:, 1] + b - 1
            jb = np.mod(jb, ny) if periodic else np.clip(jb, 0, ny - 1)
            out += lx[a] * ly[b] * G[ia, jb]
            if limit:
                lv = L[ia, jb]
                ok = np.isfinite(lv)
                lo = np.where(ok, np.minimum(lo, lv), lo)
                hi = np.where(ok, np.maximum(hi, lv), hi)
    if limit:
        miss = ~np.isfinite(lo)
        if np.any(miss):
            fin = L[np.isfinite(L)]
            lo[miss], hi[miss] = fin.min(), fin.max()
        out = np.clip(out, lo, hi)
    return out


def interpolate_bilinear(G: np.ndarray, origin, h: float, pts) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(pts, float))
    nx, ny = G.shape
    u = (pts - np.asarray(origin)) / h - 0.5
    i0 = np.clip(np.floor(u).astype(int), 0, [nx - 2, ny - 2])
    s = u - i0
    i, j = i0[:, 0], i0[:, 1]
    return ((1 - s[:, 0]) * (1 - s[:, 1]) * G[i, j] + s[:, 0] * (1 - s[:, 1]) * G[i + 1, j]
            + (1 - s[:, 0]) * s[:, 1] * G[i, j + 1] + s[:, 0] * s[:, 1] * G[i + 1, j + 1])


class _Sampler:
    """Interpolation of one cell field anywhere in the extended band."""

    def __init__(self, domain: Domain, values: np.ndarray, ghosts=None):
        self.d = domain
        self.G = extend_to_grid(values, domain)
        self.L = ScalarField(domain, values).grid()
        if ghosts is not None:
            idx, vals = ghosts
            self.G.ravel()[idx] = vals
            self.L.ravel()[idx] = vals

    def __call__(self, pts):
        return interpolate_biquadratic(self.G, self.d.origin, self.d.h, pts, limit_grid=self.L)


def _velocity_sampler(domain: Domain, v: VectorField):
    Gx = extend_to_grid(v.x, domain)
    Gy = extend_to_grid(v.y, domain)

    def vel(pts):
        return np.stack([interpolate_bilinear(Gx, domain.origin, domain.h, pts),
                         interpolate_bilinear(Gy, domain.origin, domain.h, pts)], axis=1)

    return vel


def _characteristics(domain: Domain, vel, dt: float, sign: float = -1.0):
    """RK2 feet ``x + sign dt v(x + sign dt/2 v(x))`` of all cell centres.

    Returns the start points, the segment vectors to the feet, and the first
    boundary crossing along each segment.
    """
    x = domain.centers
    xm = x + sign * 0.5 * dt * vel(x)
    X = x + sign * dt * vel(xm)
    e = X - x
    s, comp = ray_hits(domain.spec, x, e, smax=1.0)
    return x, e, s, comp


def _inflow_ghosts(domain: Domain, inflow_kind: Kind, inflow, t: float):
    """Band cells next to inflow curves carry the inflow data (at the projected point).

    Feet that stay inside the fluid but within one cell of an inflow curve
    are then interpolated between interior values and the boundary data, so
    the inflow enters even when ``|v| dt`` is much smaller than ``h``.
    """
    ops = _grid_ops(domain)
    idx, vals = [], []
    for c in domain.components:
        if c.kind != inflow_kind:
            continue
        sel = ops.band_comp == c.id
        if np.any(sel):
            idx.append(ops.band[sel])
            vals.append(np.asarray(inflow(c.id, ops.band_proj[sel], t), float) * np.ones(int(sel.sum())))
    if not idx:
        return None
    return np.concatenate(idx), np.concatenate(vals)


def _transport_values(domain: Domain, w: np.ndarray, vel, dt: float, t_end: float, sign: float,
                      inflow_kind: Kind, inflow, source=None):
    """Values carried to every cell centre along one step of characteristics.

    ``inflow(component_id, points, times)`` gives boundary data on components
    of ``inflow_kind``; ``source(points, t)`` is an optional volume term
    integrated along the path (trapezoidal rule).
    Returns the new values and the number of characteristics that crossed a
    component which is neither the inflow kind nor the outer wall.
    """
    x, e, s, comp = _characteristics(domain, vel, dt, sign)
    samp = _Sampler(domain, w, _inflow_ghosts(domain, inflow_kind, inflow, t_end + 0.5 * sign * dt))
    out = np.empty(domain.n_fluid)
    inside = comp < 0
    out[inside] = samp(x[inside] + e[inside])
    stalls = 0
    for cid in np.unique(comp[~inside]):
        sel = comp == cid
        z = x[sel] + s[sel, None] * e[sel]
        tc = t_end + sign * s[sel] * dt
        kind = domain.components[cid].kind
        if kind == inflow_kind:
            out[sel] = inflow(int(cid), z, tc)
        else:
            out[sel] = samp(z)
            if kind != Kind.OUTER:
                stalls += int(sel.sum())
    if source is not None:
        frac = np.where(inside, 1.0, s)
        foot = x + frac[:, None] * e
        out += 0.5 * dt * frac * (source(x, t_end) + source(foot, t_end + sign * frac * dt))
    return out, stalls


def semi_lagrangian_step(state: FlowState, dt: float, model: FlowModel) -> tuple[FlowState, int]:
    """One inviscid step along backward RK2 characteristics.

    The departure points use the mean of the velocities at the two time
    levels; the new-level velocity is predicted from a first pass with the
    old velocity.  Returns the new state and the number of sink crossings.
    """
    d = state.domain
    t0, t1 = state.t, state.t + dt
    flow0 = state.flow if state.flow is not None else model.flow(state.omega.values, state.circulations.C, t0)
    vmax = float(np.max(flow0.v.magnitude))
    if vmax > 0 and dt > 1.01 * d.h / vmax:
        raise CFLViolation(f"dt={dt:.3g} exceeds h/max|v|={d.h / vmax:.3g}")
    w0 = state.omega.values
    C0 = state.circulations.C

    def inflow(cid, z, tc):
        return model.omega_plus(cid, z, tc)

    g1 = model.g_traces(t1)
    p1 = model.omega_plus_traces(t1)
    r0 = _circ_rates(d, state.g, state.omega_plus, trace_outflow(state))

    vel0 = _velocity_sampler(d, flow0.v)
    w1, _ = _transport_values(d, w0, vel0, dt, t1, -1.0, Kind.SOURCE, inflow)
    m1 = {c.id: sample_to_boundary(ScalarField(d, w1), c, limit=True, time=t1) for c in d.sinks}
    C1 = C0 + 0.5 * dt * (r0 + _circ_rates(d, g1, p1, m1))
    flow1 = model.flow(w1, C1, t1)
    velh = _velocity_sampler(d, (flow0.v + flow1.v) * 0.5)
    w_new, stalls = _transport_values(d, w0, velh, dt, t1, -1.0, Kind.SOURCE, inflow)
    _check_finite(w_new)
    omega = ScalarField(d, w_new)
    m_new = {c.id: sample_to_boundary(omega, c, limit=True, time=t1) for c in d.sinks}
    C_new = C0 + 0.5 * dt * (r0 + _circ_rates(d, g1, p1, m_new))
    circ = replace(state.circulations, C=C_new, t=t1)
    flow = model.flow(w_new, C_new, t1)
    return FlowState(t1, omega, flow.v, circ, g1, p1, flow), stalls


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------


def _fixed_dt(scenario, model: FlowModel, T: float) -> float:
    h = model.domain.h
    U = scenario.velocity_scale
    if U is None:
        times = np.linspace(0, T, 33)
        emax = float(np.max(np.asarray(scenario.envelope_at(times)) * np.ones_like(times)))
        U = emax * float(np.max(model.lift.v.magnitude)) if model.lift is not None else 1.0
    dt = min(scenario.dt_max, scenario.cfl * h / max(U, 1e-12))
    n = max(1, int(math.ceil(T / dt - 1e-9)))
    return T / n


def run_scenario(scenario, nu: float, T: float | None = None, *, grid_n: int | None = None,
                 model: FlowModel | None = None, dt: float | None = None) -> RunRecord:
    """Integrate a scenario to ``T`` and record the full history.

    Viscous runs (``nu > 0``) use :func:`viscous_step`, inviscid runs
    :func:`semi_lagrangian_step`.  The step is fixed,
    ``dt = T / ceil(T / (cfl h / U))`` with ``U`` the scenario velocity scale
    (by default the peak speed of the potential lift), so runs that differ
    only in ``omega_in`` share the time grid.  Steps that would break the
    positivity bound are split into equal substeps.

    If a step fails the record is returned up to the last good step with
    ``failure`` set.
    """
    if grid_n is not None:
        scenario = scenario.with_grid(grid_n)
    T = scenario.T if T is None else T
    if model is None:
        model = FlowModel.from_scenario(scenario)
    d = model.domain
    if dt is None:
        dt = _fixed_dt(scenario, model, T)
    n_steps = max(1, int(round(T / dt)))
    dt = T / n_steps
    state = initial_state(model, scenario.omega_in_field(d), scenario.C_in)

    times = [0.0]
    omegas = [state.omega.values.copy()]
    Cs = [state.circulations.C.copy()]
    minus = {c.id: [v.values] for c, v in zip(d.sinks, trace_outflow(state).values())}
    plus = {k: [v.values] for k, v in state.omega_plus.items()}
    gs = {k: [v.values] for k, v in state.g.items()}
    dts, ledger, stalls = [], [], []
    failure = None
    for n in range(n_steps):
        t_target = (n + 1) * dt
        m_old = trace_outflow(state)
        rate_old = _boundary_rate(d, state.g, state.omega_plus, m_old)
        mass_old = state.omega.integral()
        t_start = state.t
        try:
            cur = state
            if nu > 0:
                sub = int(math.ceil((t_target - cur.t) / positivity_dt(d, cur.flow, nu) - 1e-9))
                sub = max(sub, 1)
                h_sub = (t_target - cur.t) / sub
                nst = 0
                for _ in range(sub):
                    cur = viscous_step(cur, nu, h_sub, model)
            else:
                vmax = float(np.max(cur.flow.v.magnitude))
                sub = max(1, int(math.ceil((t_target - cur.t) * vmax / (0.9 * d.h) - 1e-9)))
                h_sub = (t_target - cur.t) / sub
                nst = 0
                for _ in range(sub):
                    cur, k = semi_lagrangian_step(cur, h_sub, model)
                    nst += k
            if sub > 1:
                log.info("step %d split into %d substeps", n, sub)
        except Exception as exc:  # keep the partial record
            failure = f"{type(exc).__name__} at t={t_start:.6g}: {exc}"
            log.warning("run stopped: %s", failure)
            break
        # Source circulations depend on data only: integrate them on the main
        # time grid so that the substep count (which depends on omega) cannot
        # change them.
        g1, p1 = model.g_traces(t_target), model.omega_plus_traces(t_target)
        src = [c.id - 1 for c in d.sources]
        C_new = cur.circulations.C.copy()
        if src:
            r_old = _circ_rates(d, state.g, state.omega_plus, {})
            r_new = _circ_rates(d, g1, p1, {})
            C_new[src] = state.circulations.C[src] + 0.5 * (t_target - t_start) * (r_old + r_new)[src]
        flow = cur.flow
        if np.max(np.abs(C_new - cur.circulations.C), initial=0.0) > 1e-13:
            flow = model.flow(cur.omega.values, C_new, t_target)
        cur = replace(cur, t=t_target, g=g1, omega_plus=p1, flow=flow, v=flow.v,
                      circulations=replace(cur.circulations, C=C_new, t=t_target))
        state = cur
        m_new = trace_outflow(state)
        rate_new = _boundary_rate(d, state.g, state.omega_plus, m_new)
        h_step = t_target - t_start
        ledger.append((state.omega.integral() - mass_old) / h_step - 0.5 * (rate_old + rate_new))
        times.append(t_target)
        omegas.append(state.omega.values.copy())
        Cs.append(state.circulations.C.copy())
        for c in d.sinks:
            minus[c.id].append(m_new[c.id].values)
        for k, v in state.omega_plus.items():
            plus[k].append(v.values)
        for k, v in state.g.items():
            gs[k].append(v.values)
        dts.append(h_step)
        stalls.append(nst)
    return RunRecord(
        scenario_id=scenario.id, nu=nu, domain=d, model=model, times=np.array(times),
        omega=np.array(omegas), C=np.array(Cs), C_outer=state.circulations.C_outer, dt=np.array(dts),
        omega_minus={k: np.array(v) for k, v in minus.items()},
        omega_plus={k: np.array(v) for k, v in plus.items()},
        g={k: np.array(v) for k, v in gs.items()},
        mass_ledger=np.array(ledger), stalls=np.array(stalls, dtype=int), stride=scenario.stride,
        failure=failure)


# ---------------------------------------------------------------------------
# adjoint
# ---------------------------------------------------------------------------


class VelocityHistory:
    """Velocity on a time grid, produced on demand.

    Build with :meth:`from_record` (rebuilds each level from a run record) or
    :meth:`steady` (one frozen flow on a given time grid).
    """

    def __init__(self, domain: Domain, times, flow_fn):
        self.domain = domain
        self.times = np.asarray(times, float)
        self._fn = flow_fn

    def __len__(self):
        return len(self.times)

    def __getitem__(self, k) -> Flow:
        return self._fn(k)

    @classmethod
    def from_record(cls, record: RunRecord) -> "VelocityHistory":
        return cls(record.domain, record.times, record.flow_at)

    @classmethod
    def steady(cls, domain: Domain, times, flow: Flow | None = None) -> "VelocityHistory":
        if flow is None:
            nf = domain.n_fluid
            flow = Flow(0.0, np.zeros(domain.faces.n), [np.zeros(len(a.cell)) for a in ell.boundary_arcs(domain)],
                        VectorField(domain, np.zeros(nf), np.zeros(nf)))
        return cls(domain, times, lambda k: flow)


@dataclass
class AdjointState:
    """Backward solution on the time grid of the velocity history.

    ``phi[k]`` is the adjoint at ``times[k]``; ``phi_plus[cid][k]`` its trace
    on source ``cid``.  ``chi``, ``Psi`` and ``phi_T`` are the data used.
    """

    times: np.ndarray
    phi: np.ndarray
    phi_plus: dict
    chi: object
    Psi: object
    phi_T: np.ndarray
    stalls: int = 0

    def at(self, k: int, domain: Domain) -> ScalarField:
        return ScalarField(domain, self.phi[k])


def _as_space_time(f, domain: Domain):
    """Normalise data to a callable ``(points, t) -> values``."""
    if f is None:
        return lambda p, t: np.zeros(len(p))
    if callable(f):
        return f
    c = float(f)
    return lambda p, t: np.full(len(p), c)


def adjoint_solve(domain: Domain, history: VelocityHistory, chi=None, Psi=None, phi_T=None,
                  nu: float = 0.0) -> AdjointState:
    """Solve the backward transport problem on the history's time grid.

    Parameters
    ----------
    chi : callable ``(points, t) -> values`` or float, optional
        Volume source.
    Psi : callable ``(points, t) -> values`` or float, optional
        Data imposed on sinks, the inflow boundary of the reversed flow.
    phi_T : ScalarField, array, float or callable ``(x, y)``, optional
        Terminal values.
    nu : float
        ``0`` selects the semi-Lagrangian scheme, ``> 0`` the Robin finite
        volumes with ``nu d_n phi = -(phi - Psi) g`` on sinks.
    """
    chi_f = _as_space_time(chi, domain)
    psi_f = _as_space_time(Psi, domain)
    if phi_T is None:
        w = np.zeros(domain.n_fluid)
    elif isinstance(phi_T, ScalarField):
        w = phi_T.values.copy()
    elif callable(phi_T):
        w = np.asarray(phi_T(domain.centers[:, 0], domain.centers[:, 1]), float) * np.ones(domain.n_fluid)
    else:
        w = np.broadcast_to(np.asarray(phi_T, float), (domain.n_fluid,)).copy()
    times = history.times
    K = len(times) - 1
    phis = [None] * (K + 1)
    phis[K] = w.copy()
    stalls = 0
    V = domain.volumes
    X = domain.centers
    for k in range(K, 0, -1):
        t1, t0 = times[k], times[k - 1]
        dt = t1 - t0
        f1, f0 = history[k], history[k - 1]
        if nu > 0:
            inflow1 = {c.id: (lambda p, t=t1: psi_f(p, t)) for c in domain.sinks}
            inflow0 = {c.id: (lambda p, t=t0: psi_f(p, t)) for c in domain.sinks}
            r1 = f1.reversed()
            r0 = f0.reversed()
            w1 = w + dt * _fv_rhs(domain, w, r1, nu, inflow1, Kind.SINK, chi_f(X, t1)) / V
            w2 = w1 + dt * _fv_rhs(domain, w1, r0, nu, inflow0, Kind.SINK, chi_f(X, t0)) / V
            w = 0.5 * (w + w2)
        else:
            vel = _velocity_sampler(domain, (f0.v + f1.v) * 0.5)

            def inflow(cid, z, tc):
                return psi_f(z, tc)

            w, ns = _transport_values(domain, w, vel, dt, t0, 1.0, Kind.SINK, inflow, source=chi_f)
            stalls += ns
        _check_finite(w)
        phis[k - 1] = w.copy()
    phi = np.array(phis)
    phi_plus = {}
    for c in domain.sources:
        op = _trace_operator(domain, c)[0]
        phi_plus[c.id] = (op @ phi.T).T
    return AdjointState(times, phi, phi_plus, chi, Psi, phis[K], stalls)
