"""Weak formulations as residual functionals, the symmetrized kernel and duality.

Test functions are products ``phi(t, x) = theta(t) psi(x)`` with the temporal
profile ``theta(t) = cos^2(pi t / (2 T))``, which equals 1 at ``t = 0`` and
vanishes together with its derivative at ``t = T``.  Time integrals use the
trapezoidal rule on the time grid of the run record.

The nonlinear term of the symmetrized formulation is written with

    H_phi(x, y) = 1/2 (grad phi(x) . K(x, y) + grad phi(y) . K(y, x)),

where ``K(., y)`` is the Biot-Savart velocity of a unit point vortex at
``y``.  Kernel columns are discrete: the velocity of a one-cell delta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import elliptic as ell
from .domain import BoundaryTrace, Domain, Kind, ScalarField, VectorField, sample_to_boundary
from .errors import CoincidentPoints, NotC0TestFunction, PointOutsideFluid, ValidationError

GENERAL = "general"
C0 = "c0"


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


def default_profile(T: float):
    """``theta(t) = cos^2(pi t / (2T))`` on ``[0, T]`` and its derivative."""

    def theta(t):
        t = np.asarray(t, float)
        return np.where(t <= T, np.cos(0.5 * math.pi * t / T) ** 2, 0.0)

    def dtheta(t):
        t = np.asarray(t, float)
        return np.where(t <= T, -0.5 * math.pi / T * np.sin(math.pi * t / T), 0.0)

    return theta, dtheta


@dataclass
class TestFunction:
    """``phi(t, x) = theta(t) psi(x)`` sampled on a domain.

    Attributes
    ----------
    psi : ScalarField
        Spatial part at cell centres.
    grad : VectorField
        Its gradient at cell centres.
    boundary : dict
        Values of ``psi`` at the quadrature points, keyed by component id.
    kind : str
        ``"general"`` or ``"c0"`` (constant on every hole, zero on the outer curve).
    beta : ndarray or None
        Hole constants of a ``"c0"`` function.
    """

    __test__ = False  # not a pytest class

    psi: ScalarField
    grad: VectorField
    boundary: dict
    kind: str
    T: float
    beta: np.ndarray | None = None
    theta: object = field(default=None, repr=False)
    dtheta: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.theta is None:
            self.theta, self.dtheta = default_profile(self.T)

    @property
    def domain(self) -> Domain:
        return self.psi.domain

    def check_c0(self, tol: float = 1e-8) -> None:
        """Raise NotC0TestFunction unless ``psi`` is constant on each curve and 0 on the outer one."""
        for cid, vals in self.boundary.items():
            if cid == 0:
                if np.max(np.abs(vals)) > tol:
                    raise NotC0TestFunction("test function does not vanish on the outer curve")
            elif np.ptp(vals) > tol:
                raise NotC0TestFunction(f"test function is not constant on hole {cid}")


def make_test(domain: Domain, fn, grad_fn, T: float = 1.0) -> TestFunction:
    """General smooth test function from ``fn(x, y)`` and ``grad_fn(x, y) -> (gx, gy)``."""
    c = domain.centers
    psi = domain.evaluate(fn)
    gx, gy = grad_fn(c[:, 0], c[:, 1])
    n = domain.n_fluid
    grad = VectorField(domain, np.broadcast_to(gx, (n,)).astype(float), np.broadcast_to(gy, (n,)).astype(float))
    bnd = {comp.id: comp.evaluate(fn).values for comp in domain.components}
    return TestFunction(psi, grad, bnd, GENERAL, T)


def make_c0_test(domain: Domain, basis, beta, T: float = 1.0) -> TestFunction:
    """``psi = sum_i beta_i psi_i`` from the harmonic basis (constant ``beta_i`` on hole ``i``)."""
    beta = np.asarray(beta, float)
    if beta.shape != (domain.n_holes,):
        raise ValidationError(f"need {domain.n_holes} hole constants")
    psi = np.zeros(domain.n_fluid)
    for b, p in zip(beta, basis.psi):
        psi = psi + b * p.values
    consts = np.concatenate([[0.0], beta])
    gx, gy = ell.dirichlet_gradient(domain, psi, list(consts))
    bnd = {comp.id: np.full(comp.n_q, consts[comp.id]) for comp in domain.components}
    tf = TestFunction(ScalarField(domain, psi), VectorField(domain, gx, gy), bnd, C0, T, beta)
    tf.check_c0()
    return tf


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def halfplane_green(x, y) -> np.ndarray:
    """Regular part ``(1 / 4 pi) log(1 + 4 x2 y2 / |x - y|^2)`` of the Dirichlet Green function of the upper half-plane."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    r2 = np.sum((x - y) ** 2, axis=-1)
    return np.log1p(4 * x[..., 1] * y[..., 1] / r2) / (4 * math.pi)


def halfplane_green_gradient(x, y) -> np.ndarray:
    """Gradient in ``x`` of :func:`halfplane_green`:
    ``((0, y2) - 2 x2 y2 (x - y) / |x - y|^2) / (pi (|x - y|^2 + 4 x2 y2))``."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    d = x - y
    r2 = np.sum(d * d, axis=-1)
    den = math.pi * (r2 + 4 * x[..., 1] * y[..., 1])
    c = 2 * x[..., 1] * y[..., 1] / r2
    gx = -c * d[..., 0] / den
    gy = (y[..., 1] - c * d[..., 1]) / den
    return np.stack([gx, gy], axis=-1)


def halfplane_symmetrized_kernel(x, y) -> np.ndarray:
    """``(0, x2 + y2) / (pi (|x - y|^2 + 4 x2 y2))`` for points of the upper half-plane.

    This is the symmetrization ``grad_1 R(x, y) + grad_1 R(y, x)`` of the
    gradient in the first variable of the regular part ``R`` of the Green
    function: its tangential
    component vanishes identically while the normal one is singular when
    both points approach the same boundary point.  Vectorised over leading
    axes.

    Raises
    ------
    PointOutsideFluid
        If a point has ``x2 <= 0``.
    CoincidentPoints
        If ``x == y`` for some pair.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.any(x[..., 1] <= 0) or np.any(y[..., 1] <= 0):
        raise PointOutsideFluid("half-plane points need a positive second coordinate")
    d = x - y
    r2 = np.sum(d * d, axis=-1)
    if np.any(r2 == 0):
        raise CoincidentPoints("kernel evaluated on the diagonal")
    val = (x[..., 1] + y[..., 1]) / (math.pi * (r2 + 4 * x[..., 1] * y[..., 1]))
    return np.stack([np.zeros_like(val), val], axis=-1)


def kernel_block(domain: Domain, basis, sources, targets, chunk: int = 128):
    """``K(x_t, y_s)`` for fluid cells ``targets`` (rows) and ``sources`` (columns).

    Each column is the Biot-Savart velocity of a one-cell delta of unit mass
    at the source cell; all columns of a chunk share one multi-right-hand-side
    LU solve.  Returns ``(Kx, Ky)`` of shape ``(len(targets), len(sources))``.
    """
    sources = np.asarray(sources, int)
    targets = np.asarray(targets, int)
    n = domain.n_fluid
    D = ell._dirichlet(domain)
    chiV, lapV = ell._cutoff_tables(domain)
    Gx, Gy, Bx, By = ell._dirichlet_gradient_ops(domain)
    Gx, Gy, Bx, By = Gx[targets], Gy[targets], Bx[targets], By[targets]
    geo = ell._sw_geometry(domain)
    P = np.array([p.values for p in basis.psi]).T if domain.n_holes else np.zeros((n, 0))
    Kx = np.zeros((len(targets), len(sources)))
    Ky = np.zeros_like(Kx)
    for s0 in range(0, len(sources), chunk):
        src = sources[s0:s0 + chunk]
        k = len(src)
        R = np.zeros((n, k))
        R[src, np.arange(k)] = 1.0 / domain.volumes[src]
        psi0 = D.lu.solve(R)
        flux0 = -(lapV @ psi0) + chiV @ R
        c = -basis.A @ flux0
        psi = psi0 + P @ c
        consts = np.vstack([np.zeros((1, k)), c])
        bl = consts[geo.link_comp]
        dx = Gx @ psi + Bx @ bl
        dy = Gy @ psi + By @ bl
        Kx[:, s0:s0 + k] = -dy
        Ky[:, s0:s0 + k] = dx
    return Kx, Ky


def _cell_of(domain: Domain, p) -> int:
    try:
        return domain.fluid_cell_of(p)
    except PointOutsideFluid:
        d = np.hypot(*(domain.centers - np.asarray(p, float)).T)
        i = int(np.argmin(d))
        if d[i] > domain.h:
            raise
        return i


def h_phi(domain: Domain, phi: TestFunction, x, y, basis) -> float:
    """``H_phi(x, y)`` from discrete kernel columns at the cells of ``x`` and ``y``.

    Raises
    ------
    CoincidentPoints
        If ``x`` and ``y`` coincide or fall into the same cell.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if np.allclose(x, y, rtol=0, atol=0):
        raise CoincidentPoints("H_phi is not defined on the diagonal")
    i, j = domain.fluid_cell_of(x), domain.fluid_cell_of(y)
    if i == j:
        raise CoincidentPoints("both points lie in the same cell")
    Kx, Ky = kernel_block(domain, basis, [i, j], [i, j])
    g = phi.grad
    return 0.5 * (g.x[i] * Kx[0, 1] + g.y[i] * Ky[0, 1] + g.x[j] * Kx[1, 0] + g.y[j] * Ky[1, 0])


def _h_matrix(phi: TestFunction, cells, Kx, Ky):
    g = phi.grad
    A = g.x[cells][:, None] * Kx + g.y[cells][:, None] * Ky  # A[l, m] = grad phi(x_l) . K(x_l, y_m)
    H = 0.5 * (A + A.T)
    np.fill_diagonal(H, 0.0)
    return H


class KernelCache:
    """Kernel columns on a lattice of every ``stride``-th cell in each direction.

    Pairs closer than ``3h`` are only the lattice self-pairs (for
    ``stride >= 3``), which are excluded.  Cell masses are deposited on the lattice with bilinear weights (weights
    on missing lattice nodes are dropped and the rest renormalised; cells
    with no surrounding node go to the nearest one), so that double
    integrals become lattice quadratic forms.
    """

    def __init__(self, domain: Domain, basis, stride: int = 4):
        self.domain = domain
        self.basis = basis
        self.stride = s = int(stride)
        r = s // 2
        cells = domain.cells
        on = ((cells[:, 0] - r) % s == 0) & ((cells[:, 1] - r) % s == 0)
        self.lattice = np.flatnonzero(on)
        lat_index = -np.ones((domain.nx + s + 1, domain.ny + s + 1), int)
        lat_index[cells[on, 0], cells[on, 1]] = np.arange(on.sum())
        rows, cols, vals = [], [], []
        tree = cKDTree(domain.centers[self.lattice])
        for q, (i, j) in enumerate(cells):
            i0 = (i - r) // s * s + r
            j0 = (j - r) // s * s + r
            a, b = (i - i0) / s, (j - j0) / s
            cand = []
            for di, wi in ((0, 1 - a), (s, a)):
                for dj, wj in ((0, 1 - b), (s, b)):
                    ii, jj = i0 + di, j0 + dj
                    w = wi * wj
                    if w > 0 and 0 <= ii < domain.nx and 0 <= jj < domain.ny and lat_index[ii, jj] >= 0:
                        cand.append((lat_index[ii, jj], w))
            if cand:
                tot = sum(w for _, w in cand)
                for m, w in cand:
                    rows.append(m)
                    cols.append(q)
                    vals.append(w / tot)
            else:
                rows.append(int(tree.query(domain.centers[q])[1]))
                cols.append(q)
                vals.append(1.0)
        self.deposit = sparse.csr_matrix((vals, (rows, cols)), shape=(len(self.lattice), domain.n_fluid))
        self.Kx, self.Ky = kernel_block(domain, basis, self.lattice, self.lattice)
        self.points = domain.centers[self.lattice]
        self._Kx0, self._Ky0 = self.Kx.copy(), self.Ky.copy()
        np.fill_diagonal(self._Kx0, 0.0)
        np.fill_diagonal(self._Ky0, 0.0)

    def H(self, phi: TestFunction) -> np.ndarray:
        """``H_phi`` between lattice points (zero diagonal)."""
        return _h_matrix(phi, self.lattice, self.Kx, self.Ky)

    def double_integral(self, phi: TestFunction, omega, H=None) -> float:
        """``int int H_phi(x, y) omega(x) omega(y)`` with the lattice self-pairs excluded.

        Both ``omega grad phi`` (first variable) and ``omega`` (second
        variable) are deposited on the lattice; by symmetry of the pair sum
        this equals the lattice quadrature of ``H_phi``.  ``H`` is accepted
        for interface compatibility and ignored.
        """
        w = omega.values if isinstance(omega, ScalarField) else np.asarray(omega, float)
        wv = w * self.domain.volumes
        M = self.deposit @ wv
        Dx = self.deposit @ (wv * phi.grad.x)
        Dy = self.deposit @ (wv * phi.grad.y)
        return float(Dx @ (self._Kx0 @ M) + Dy @ (self._Ky0 @ M))

    def excluded_bound(self, phi: TestFunction, omega, H=None) -> float:
        """Bound on the excluded self-pairs: max ``|H|`` times the sum of squared lattice masses."""
        w = omega.values if isinstance(omega, ScalarField) else np.asarray(omega, float)
        M = self.deposit @ (w * self.domain.volumes)
        H = self.H(phi) if H is None else H
        return float(np.max(np.abs(H)) * np.sum(M * M))


def direct_nonlinear_term(domain: Domain, phi: TestFunction, omega, basis) -> float:
    """``int omega K_H[omega] . grad phi`` with the Biot-Savart velocity."""
    w = omega.values if isinstance(omega, ScalarField) else np.asarray(omega, float)
    k = ell.biot_savart(domain, w, basis)
    return float(np.dot(domain.volumes * w, k.x * phi.grad.x + k.y * phi.grad.y))


# ---------------------------------------------------------------------------
# boundedness scan
# ---------------------------------------------------------------------------


@dataclass
class ScanReport:
    """Stratum maxima of ``|H_phi|``.

    ``levels[k]`` is the distance scale of stratum ``k`` (finest first): both
    points lie at distance ``[a, 2a)`` from the same boundary curve and at
    separation ``[a, 2a)`` from each other.  ``interior_max`` is taken over
    pairs whose points are both farther than ``interior_distance`` from the
    boundary.
    """

    levels: np.ndarray
    stratum_max: np.ndarray
    stratum_count: np.ndarray
    interior_max: float
    interior_distance: float

    @property
    def ratio(self) -> float:
        """Finest-stratum max over interior max."""
        if self.interior_max == 0:
            return 0.0 if self.stratum_max[0] == 0 else math.inf
        return float(self.stratum_max[0] / self.interior_max)

    @property
    def ratios(self) -> np.ndarray:
        return self.stratum_max / self.interior_max if self.interior_max > 0 else np.zeros_like(self.stratum_max)


def _scan_points(domain: Domain, n_anchor: int, levels, n_interior: int, seed: int, depth: float,
                 interior_fraction: float):
    h = domain.h
    pts, tags = [], []
    for comp in domain.components:
        if not comp.is_circle:
            continue
        c, R = np.asarray(comp.shape.center), comp.shape.radius
        inward = -1.0 if comp.id == 0 else 1.0
        for a0 in 2 * math.pi * (np.arange(n_anchor) + 0.5) / n_anchor:
            for k, a in enumerate(levels):
                d = depth * a
                rad = R + inward * d
                dth = depth * a / rad  # separation depth * a along the arc
                for th in (a0 - 0.5 * dth, a0 + 0.5 * dth):
                    pts.append(c + rad * np.array([math.cos(th), math.sin(th)]))
                    tags.append((comp.id, k))
    pts = np.array(pts).reshape(-1, 2)
    sd, near = domain.signed_distance(pts)
    keep = (sd > 0) & (near == np.array([c for c, _ in tags], int)) & (domain.locate(pts) >= 0)
    pts = pts[keep]
    tags = [tg for tg, k in zip(tags, keep) if k]
    rng = np.random.default_rng(seed)
    sd_cells, _ = domain.signed_distance(domain.centers)
    far = np.flatnonzero(sd_cells > interior_fraction * sd_cells.max())
    pick = rng.choice(far, size=min(n_interior, len(far)), replace=False)
    cells = [_cell_of(domain, p) for p in pts] + list(pick)
    tags += [(-1, -1)] * len(pick)
    return np.array(cells), tags


def h_phi_bound_scan(domain: Domain, phi: TestFunction, basis, n_samples: int = 16, *, levels=None,
                     n_interior: int = 60, seed: int = 0, depth: float = 1.5,
                     interior_fraction: float = 0.5) -> ScanReport:
    """Stratified maxima of ``|H_phi|`` near the boundary and in the interior.

    ``n_samples`` anchors per circular boundary curve; around each anchor a
    pair of points is placed for every distance scale in ``levels``
    (default ``3h, 6h, 12h, 24h``).  All pairs between sample points are
    classified by the strata of both points and their separation.
    """
    h = domain.h
    levels = np.asarray(levels if levels is not None else [3 * h, 6 * h, 12 * h, 24 * h], float)
    cells, tags = _scan_points(domain, n_samples, levels, n_interior, seed, depth, interior_fraction)
    uniq, inv = np.unique(cells, return_inverse=True)
    Kx, Ky = kernel_block(domain, basis, uniq, uniq)
    H = np.abs(_h_matrix(phi, uniq, Kx, Ky))
    X = domain.centers[uniq]
    sd, comp = domain.signed_distance(X)
    sep = np.hypot(X[:, None, 0] - X[None, :, 0], X[:, None, 1] - X[None, :, 1])
    smax = np.zeros(len(levels))
    count = np.zeros(len(levels), int)
    for k, a in enumerate(levels):
        inb = (sd >= a) & (sd < 2 * a)
        mask = inb[:, None] & inb[None, :] & (comp[:, None] == comp[None, :]) & (sep >= a) & (sep < 2 * a)
        count[k] = int(mask.sum() // 2)
        smax[k] = float(H[mask].max()) if mask.any() else 0.0
    dint = interior_fraction * float(domain.signed_distance(domain.centers)[0].max())
    interior = (sd > dint)
    mask = interior[:, None] & interior[None, :] & (sep >= 3 * h)
    imax = float(H[mask].max()) if mask.any() else 0.0
    return ScanReport(levels, smax, count, imax, dint)


# ---------------------------------------------------------------------------
# residual reports
# ---------------------------------------------------------------------------


@dataclass
class ResidualReport:
    """Terms of a weak identity; ``total`` is their signed sum (zero for an exact solution)."""

    name: str
    terms: dict
    signs: dict

    @property
    def total(self) -> float:
        return float(sum(self.signs[k] * v for k, v in self.terms.items()))

    @property
    def scale(self) -> float:
        return float(max([abs(v) for v in self.terms.values()] + [0.0]))

    @property
    def relative(self) -> float:
        s = self.scale
        return abs(self.total) / s if s > 0 else 0.0

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("term,value,sign\n")
            for k, v in self.terms.items():
                fh.write(f"{k},{float(v):.17g},{self.signs[k]:+d}\n")
            fh.write(f"total,{float(self.total):.17g},0\n")

    def summary(self, tol: float) -> str:
        ok = "pass" if self.relative <= tol else "FAIL"
        return f"{self.name}: relative residual {self.relative:.3e} (tol {tol:g}) {ok}"


def _check_record(record, T):
    if record.failure is not None:
        from .errors import IncompleteRecord

        raise IncompleteRecord(f"record stopped early: {record.failure}")
    if record.T < T * (1 - 1e-12):
        from .errors import IncompleteRecord

        raise IncompleteRecord(f"record ends at {record.T} < {T}")


def _velocities(record):
    cache = getattr(record, "_velocity_cache", None)
    if cache is None:
        cache = [record.flow_at(k).v for k in range(len(record.times))]
        try:
            record._velocity_cache = cache
        except AttributeError:  # pragma: no cover
            pass
    return cache


def _boundary_terms(record, phi: TestFunction, beta_fn=None):
    """``int int g omega_plus phi`` on sources and ``int int g omega_minus phi`` on sinks."""
    d = record.domain
    th = phi.theta(record.times)
    tw = record.time_weights() * th
    f = beta_fn if beta_fn is not None else (lambda s: s)
    bin_, bout = 0.0, 0.0
    for c in d.holes:
        vals = phi.boundary[c.id]
        g = record.g[c.id]
        if c.kind == Kind.SOURCE:
            bin_ += float(tw @ ((g * f(record.omega_plus[c.id])) @ (vals * c.weights)))
        else:
            bout += float(tw @ ((g * f(record.omega_minus[c.id])) @ (vals * c.weights)))
    return bin_, bout


def _viscous_term(record, phi: TestFunction, W):
    """``-nu int int grad W . grad phi`` in face form."""
    if record.nu <= 0:
        return 0.0
    from .transport import _fv_ops

    d = record.domain
    ops = _fv_ops(d)
    f = d.faces
    dphi = (phi.psi.values[f.b] - phi.psi.values[f.a]) * ops.cond
    per_t = (W[:, f.b] - W[:, f.a]) @ dphi
    tw = record.time_weights() * phi.theta(record.times)
    return -record.nu * float(tw @ per_t)


def _transport_terms(record, phi: TestFunction, W, velocities):
    d = record.domain
    V = d.volumes
    t = record.times
    tw = record.time_weights()
    initial = float(np.dot(V * W[0], phi.psi.values)) * float(phi.theta(0.0))
    dt_term = float((tw * phi.dtheta(t)) @ (W @ (V * phi.psi.values)))
    adv = np.array([np.dot(V * W[k], v.x * phi.grad.x + v.y * phi.grad.y) for k, v in enumerate(velocities)])
    tr = float((tw * phi.theta(t)) @ adv)
    return initial, dt_term, tr


def distributional_residual(record, phi: TestFunction) -> ResidualReport:
    """Residual of the distributional formulation

    ``int omega_in phi(0) + int int omega (d_t phi + v . grad phi)
      - int int_sources g omega_plus phi - int int_sinks g omega_minus phi``
    plus, for viscous records, ``-nu int int grad omega . grad phi``.

    Raises
    ------
    IncompleteRecord
    """
    _check_record(record, phi.T)
    W = record.omega
    initial, dt_term, tr = _transport_terms(record, phi, W, _velocities(record))
    bin_, bout = _boundary_terms(record, phi)
    terms = {"initial": initial, "time": dt_term, "transport": tr, "boundary_in": bin_, "boundary_out": bout,
             "viscous": _viscous_term(record, phi, W)}
    signs = {"initial": 1, "time": 1, "transport": 1, "boundary_in": -1, "boundary_out": -1, "viscous": 1}
    return ResidualReport("distributional", terms, signs)


def beta_default(s):
    """``beta(s) = s / sqrt(1 + s^2)``."""
    s = np.asarray(s, float)
    return s / np.sqrt(1 + s * s)


def renormalized_residual(record, phi: TestFunction, beta=beta_default) -> ResidualReport:
    """Distributional residual with ``beta(omega)``, ``beta(omega_in)``, ``beta(omega_plus)``, ``beta(omega_minus)``.

    For viscous records the diffusion of ``beta(omega)`` is included as
    ``-nu int int grad beta(omega) . grad phi``; the defect measure
    ``nu beta''(omega) |grad omega|^2`` is not, so viscous residuals carry an
    ``O(nu)`` part.
    """
    _check_record(record, phi.T)
    B = beta(record.omega)
    initial, dt_term, tr = _transport_terms(record, phi, B, _velocities(record))
    bin_, bout = _boundary_terms(record, phi, beta)
    terms = {"initial": initial, "time": dt_term, "transport": tr, "boundary_in": bin_, "boundary_out": bout,
             "viscous": _viscous_term(record, phi, B)}
    signs = {"initial": 1, "time": 1, "transport": 1, "boundary_in": -1, "boundary_out": -1, "viscous": 1}
    return ResidualReport("renormalized", terms, signs)


def symmetrized_residual(record, phi: TestFunction, basis, cache: KernelCache | None = None) -> ResidualReport:
    """Residual of the symmetrized formulation for a ``"c0"`` test function.

    Terms: initial, ``omega (d_t phi + e v_g . grad phi)``, the circulation
    terms ``C_i int omega X_i . grad phi``, the lattice double integral of
    ``H_phi omega omega``, the two boundary terms and, for viscous records,
    ``-nu int int grad omega . grad phi``.

    Raises
    ------
    NotC0TestFunction
    """
    if phi.kind != C0:
        raise NotC0TestFunction("the symmetrized formulation needs a test function of class c0")
    phi.check_c0()
    _check_record(record, phi.T)
    d = record.domain
    model = record.model
    V = d.volumes
    t = record.times
    tw = record.time_weights() * phi.theta(t)
    W = record.omega
    initial = float(np.dot(V * W[0], phi.psi.values)) * float(phi.theta(0.0))
    time_term = float((record.time_weights() * phi.dtheta(t)) @ (W @ (V * phi.psi.values)))
    gphi = phi.grad
    if model.lift is not None:
        vg = model.lift.v
        e = np.array([float(model.envelope(tt)) for tt in t])
        vg_term = float((tw * e) @ (W @ (V * (vg.x * gphi.x + vg.y * gphi.y))))
    else:
        vg_term = 0.0
    X = ell.harmonic_fields(d, basis)
    circ = 0.0
    for i, Xi in enumerate(X):
        per_t = W @ (V * (Xi.x * gphi.x + Xi.y * gphi.y))
        circ += float(tw @ (record.C[:, i] * per_t))
    cache = cache if cache is not None else KernelCache(d, basis)
    dbl = np.array([cache.double_integral(phi, W[k]) for k in range(len(t))])
    dbl_term = float(tw @ dbl)
    bin_, bout = _boundary_terms(record, phi)
    terms = {"initial": initial, "time": time_term, "v_g": vg_term, "circulation": circ, "double": dbl_term,
             "boundary_in": bin_, "boundary_out": bout, "viscous": _viscous_term(record, phi, W)}
    signs = {"initial": 1, "time": 1, "v_g": 1, "circulation": 1, "double": 1, "boundary_in": -1,
             "boundary_out": -1, "viscous": 1}
    return ResidualReport("symmetrized", terms, signs)


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------


@dataclass
class DualityReport:
    """Both sides of the duality identity.

    ``lhs = int int omega chi + int int_sinks g omega_minus Psi`` and
    ``rhs = int omega_in phi(0) - int omega(T) phi_T - int int_sources g omega_plus phi_plus``.
    """

    terms: dict
    adjoint: object = field(repr=False, default=None)

    @property
    def lhs(self) -> float:
        return self.terms["chi"] + self.terms["sink"]

    @property
    def rhs(self) -> float:
        return self.terms["initial"] - self.terms["final"] - self.terms["source"]

    @property
    def residual(self) -> float:
        return self.lhs - self.rhs

    @property
    def scale(self) -> float:
        return float(max(abs(v) for v in self.terms.values()))

    @property
    def relative(self) -> float:
        s = self.scale
        return abs(self.residual) / s if s > 0 else 0.0


def duality_check(record, chi=None, Psi=None, phi_T=None, basis=None, *, quadrature: str = "arcs") -> DualityReport:
    """Solve the adjoint on the record's velocity history and evaluate the duality identity.

    ``chi(points, t)``, ``Psi(points, t)`` and ``phi_T(x, y)`` as in
    :func:`sinkflow.transport.adjoint_solve`; the adjoint uses the record's
    viscosity.

    ``quadrature`` selects the boundary pairing.  ``"arcs"`` pairs the
    discrete boundary fluxes of the finite-volume cut arcs with the data at
    the arc midpoints and the one-sided cell values, which is how the
    schemes exchange mass with the boundary.  ``"trace"`` uses the
    quadrature rule of each curve with extrapolated traces.
    """
    from .transport import VelocityHistory, _as_space_time, adjoint_solve

    if quadrature not in ("arcs", "trace"):
        raise ValueError("quadrature must be 'arcs' or 'trace'")
    d = record.domain
    arcs = ell.boundary_arcs(d)
    arc_flux = {}

    def flow_fn(k):
        f = record.flow_at(k)
        arc_flux[k] = f.arcs
        return f

    hist = VelocityHistory(d, record.times, flow_fn)
    adj = adjoint_solve(d, hist, chi, Psi, phi_T, nu=record.nu)
    V = d.volumes
    t = record.times
    tw = record.time_weights()
    chi_f = _as_space_time(chi, d)
    psi_f = _as_space_time(Psi, d)
    chi_term = float(sum(tw[k] * np.dot(V * record.omega[k], chi_f(d.centers, t[k])) for k in range(len(t))))
    sink = 0.0
    source = 0.0
    if quadrature == "arcs":
        model = record.model
        for k in range(len(t)):
            if k not in arc_flux:
                arc_flux[k] = record.flow_at(k).arcs
            for a, G in zip(arcs, arc_flux[k]):
                c = d.components[a.component]
                if c.kind == Kind.SINK:
                    sink += tw[k] * float(np.sum(G * record.omega[k][a.cell] * psi_f(a.mid, t[k])))
                elif c.kind == Kind.SOURCE:
                    wp = model.omega_plus(c.id, a.mid, t[k])
                    source += tw[k] * float(np.sum(G * wp * adj.phi[k][a.cell]))
    else:
        for c in d.holes:
            g = record.g[c.id]
            if c.kind == Kind.SINK:
                ps = np.array([psi_f(c.points, tk) for tk in t])
                sink += float(tw @ ((g * record.omega_minus[c.id] * ps) @ c.weights))
            else:
                source += float(tw @ ((g * record.omega_plus[c.id] * adj.phi_plus[c.id]) @ c.weights))
    initial = float(np.dot(V * record.omega[0], adj.phi[0]))
    final = float(np.dot(V * record.omega[-1], adj.phi[-1]))
    return DualityReport({"chi": chi_term, "sink": sink, "initial": initial, "final": final, "source": source}, adj)


def bump(center, radius: float, amplitude: float = 1.0):
    """Smooth compactly supported bump ``a exp(1 - 1/(1 - r^2/R^2))``, as ``(points, t)`` and ``(x, y)`` callables."""
    cx, cy = center

    def f_xy(x, y):
        r2 = ((np.asarray(x) - cx) ** 2 + (np.asarray(y) - cy) ** 2) / radius ** 2
        with np.errstate(divide="ignore", over="ignore"):
            return np.where(r2 < 1, amplitude * np.exp(1 - 1 / np.maximum(1 - r2, 1e-300)), 0.0)

    def f_pt(p, t=0.0):
        p = np.atleast_2d(p)
        return f_xy(p[:, 0], p[:, 1])

    return f_pt, f_xy
