"""Elliptic solves on perforated domains.

Dirichlet problems use the Shortley-Weller five-point stencil: at a cell whose
axis neighbour lies across the boundary, the neighbour is replaced by the
exact crossing point of the boundary with the grid line.  The resulting
matrix is not symmetric, so it is factorised once per domain with a sparse
LU and reused for every right-hand side.

The Neumann problem for the potential lift is discretised by finite volumes
on the merged cut cells (two-point fluxes weighted by the fluid face
apertures, boundary fluxes from the quadrature rule).  This makes the lift's
face fluxes exactly compatible with the boundary data, which the conservative
transport scheme relies on.

Velocity fields are ``v = v_g + sum_i C_i X_i + K_H[omega]`` with

* ``v_g = grad(phi_g)``, ``d phi_g / dn = g``;
* ``X_i = perp-grad(sum_j A_ji psi_j)``, ``psi_j`` harmonic with boundary
  values ``delta_jk`` on hole ``k`` and 0 on the outer curve, ``A = M^{-1}``;
* ``K_H[omega] = perp-grad(psi)``, ``Lap(psi) = omega``, ``psi`` constant on each
  hole and 0 on the outer curve, with zero circulation around every hole.

Here ``perp-grad(psi) = (-psi_y, psi_x)`` so that ``curl perp-grad(psi) = Lap(psi)``.
The period matrix ``M_jk`` (flux of ``psi_k`` through hole ``j``) and the
fluxes needed for the circulation constraint are evaluated with smooth
cut-off functions, which avoids differentiating at the boundary:
``flux_j(psi) = int chi_j Lap(psi) - int psi Lap(chi_j)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .domain import (BoundaryTrace, Disk, Domain, ScalarField, VectorField, ls_weights,
                     ray_hits, sample_to_boundary)
from .errors import CompatibilityError, SingularMatrixError, SolverError

# directions: +x, -x, +y, -y
_DIRS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]], dtype=float)


# ---------------------------------------------------------------------------
# Shortley-Weller Dirichlet operator
# ---------------------------------------------------------------------------


@dataclass
class _SWGeometry:
    dist: np.ndarray  # (n, 4) distance to the neighbouring datum
    link: np.ndarray  # (n, 4) boundary-link index or -1
    nb: np.ndarray  # (n, 4) neighbouring fluid index or -1
    link_comp: np.ndarray
    link_pts: np.ndarray
    link_cell: np.ndarray


def _sw_geometry(domain: Domain) -> _SWGeometry:
    key = "sw_geometry"
    if key in domain._cache:
        return domain._cache[key]
    n, h = domain.n_fluid, domain.h
    dist = np.full((n, 4), h)
    link = np.full((n, 4), -1)
    nb = domain.nbr.copy()
    lc, lp, lcell = [], [], []
    cand = np.flatnonzero(domain.near)
    nl = 0
    for d in range(4):
        p = domain.centers[cand]
        e = np.tile(_DIRS[d] * h, (len(cand), 1))
        s, comp = ray_hits(domain.spec, p, e, smax=1.0)
        missing = (nb[cand, d] < 0) & (comp < 0)
        if missing.any():
            # neighbour centre exactly on the boundary
            s[missing] = 1.0
            _, comp[missing] = domain.signed_distance(p[missing] + e[missing])
        hit = comp >= 0
        rows = cand[hit]
        m = len(rows)
        dist[rows, d] = np.maximum(s[hit], 1e-6) * h
        link[rows, d] = nl + np.arange(m)
        nb[rows, d] = -1
        lc.append(comp[hit])
        lp.append(p[hit] + s[hit, None] * e[hit])
        lcell.append(rows)
        nl += m
    geo = _SWGeometry(dist, link, nb, np.concatenate(lc), np.concatenate(lp), np.concatenate(lcell))
    domain._cache[key] = geo
    return geo


def _bvals_at(domain: Domain, bvals, comp, pts):
    """Evaluate boundary data at points ``pts`` lying on components ``comp``.

    ``bvals`` is a scalar (all components), a sequence indexed by component id,
    or a dict ``{component_id: datum}``; each datum is a number, a callable
    ``f(x, y)`` or a :class:`BoundaryTrace` (interpolated along the curve).
    """
    out = np.zeros(len(pts))
    if bvals is None:
        return out
    if np.isscalar(bvals):
        return np.full(len(pts), float(bvals))
    if callable(bvals) or isinstance(bvals, BoundaryTrace):
        bvals = {c.id: bvals for c in domain.components} if callable(bvals) else {bvals.component: bvals}
    items = bvals.items() if isinstance(bvals, dict) else enumerate(bvals)
    for cid, datum in items:
        sel = comp == cid
        if not sel.any() or datum is None:
            continue
        P = pts[sel]
        if callable(datum):
            out[sel] = datum(P[:, 0], P[:, 1])
        elif isinstance(datum, BoundaryTrace):
            c = domain.components[cid]
            out[sel] = _interp_along(c, datum.values, P)
        else:
            out[sel] = float(datum)
    return out


def _interp_along(comp, values, P):
    """Periodic linear interpolation of quadrature-point values in arclength."""
    if comp.is_circle:
        c = comp.shape.center
        s = (np.arctan2(P[:, 1] - c[1], P[:, 0] - c[0]) % (2 * math.pi)) * comp.shape.radius
    else:
        R = comp.shape
        w, hh = R.xmax - R.xmin, R.ymax - R.ymin
        x, y = P[:, 0], P[:, 1]
        dists = np.stack([abs(y - R.ymin), abs(x - R.xmax), abs(y - R.ymax), abs(x - R.xmin)])
        side = np.argmin(dists, axis=0)
        s = np.choose(side, [x - R.xmin, w + y - R.ymin, w + hh + R.xmax - x, 2 * w + hh + R.ymax - y])
    return np.interp(s, comp.s, values, period=comp.perimeter)


@dataclass
class _Dirichlet:
    L: sparse.csr_matrix
    lu: object
    link_row: np.ndarray
    link_coef: np.ndarray


def _dirichlet(domain: Domain) -> _Dirichlet:
    key = "dirichlet"
    if key in domain._cache:
        return domain._cache[key]
    geo = _sw_geometry(domain)
    n = domain.n_fluid
    rows, cols, vals = [], [], []
    lrow, lcoef = np.zeros(len(geo.link_comp), int), np.zeros(len(geo.link_comp))
    diag = np.zeros(n)
    for plus, minus in ((0, 1), (2, 3)):
        b, a = geo.dist[:, plus], geo.dist[:, minus]
        cp = 2.0 / (b * (a + b))
        cm = 2.0 / (a * (a + b))
        diag -= 2.0 / (a * b)
        for d, c in ((plus, cp), (minus, cm)):
            has = geo.nb[:, d] >= 0
            rows.append(np.flatnonzero(has))
            cols.append(geo.nb[has, d])
            vals.append(c[has])
            lk = geo.link[:, d] >= 0
            lrow[geo.link[lk, d]] = np.flatnonzero(lk)
            lcoef[geo.link[lk, d]] = c[lk]
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    L = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    lu = spla.splu(L.tocsc(), permc_spec="COLAMD")
    out = _Dirichlet(L, lu, lrow, lcoef)
    domain._cache[key] = out
    return out


def _dirichlet_solve(domain: Domain, rhs: np.ndarray, bvals) -> np.ndarray:
    D = _dirichlet(domain)
    geo = _sw_geometry(domain)
    bl = _bvals_at(domain, bvals, geo.link_comp, geo.link_pts)
    r = np.asarray(rhs, float).copy()
    np.subtract.at(r, D.link_row, D.link_coef * bl)
    u = D.lu.solve(r)
    res = np.max(np.abs(D.L @ u - r)) * domain.h ** 2
    scale = np.max(np.abs(rhs)) if np.size(rhs) else 0.0
    if not np.all(np.isfinite(u)) or res > 1e-10 * (scale + 1.0) * max(1.0, np.max(np.abs(u))):
        raise SolverError(f"Dirichlet solve residual {res:.3e} above tolerance")
    return u


def solve_poisson_dirichlet(domain: Domain, rhs, bvals=0.0) -> ScalarField:
    """Solve ``Lap(u) = rhs`` in the fluid with ``u = bvals`` on the boundary.

    Parameters
    ----------
    rhs : ScalarField or ndarray
    bvals : scalar, sequence or dict
        Boundary data per component id (number, callable ``f(x, y)``, or
        BoundaryTrace).

    Raises
    ------
    SolverError
        If the scaled residual exceeds ``1e-10 (||rhs|| + 1)``.
    """
    r = rhs.values if isinstance(rhs, ScalarField) else np.broadcast_to(rhs, (domain.n_fluid,))
    return ScalarField(domain, _dirichlet_solve(domain, r, bvals))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _dirichlet_gradient_ops(domain: Domain):
    """Operators for the gradient of a field with known boundary values.

    Returns ``(Gx, Gy, Bx, By)`` where ``Gx @ u + Bx @ bl`` is the x
    derivative and ``bl`` holds boundary values at the Shortley-Weller links.
    """
    key = "dgrad"
    if key in domain._cache:
        return domain._cache[key]
    geo = _sw_geometry(domain)
    n, nl = domain.n_fluid, len(geo.link_comp)
    ops = []
    for plus, minus in ((0, 1), (2, 3)):
        b, a = geo.dist[:, plus], geo.dist[:, minus]
        cp = a / (b * (a + b))
        cm = -b / (a * (a + b))
        c0 = (b - a) / (a * b)
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [c0]
        brow, bcol, bval = [], [], []
        for d, c in ((plus, cp), (minus, cm)):
            has = geo.nb[:, d] >= 0
            rows.append(np.flatnonzero(has))
            cols.append(geo.nb[has, d])
            vals.append(c[has])
            lk = geo.link[:, d] >= 0
            brow.append(np.flatnonzero(lk))
            bcol.append(geo.link[lk, d])
            bval.append(c[lk])
        G = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(n, n))
        B = sparse.csr_matrix((np.concatenate(bval), (np.concatenate(brow), np.concatenate(bcol))),
                              shape=(n, nl))
        ops.append((G, B))
    out = (ops[0][0], ops[1][0], ops[0][1], ops[1][1])
    domain._cache[key] = out
    return out


def dirichlet_gradient(domain: Domain, u, bvals=0.0):
    """Second-order gradient of ``u`` using its boundary values at crossings."""
    uv = u.values if isinstance(u, ScalarField) else u
    Gx, Gy, Bx, By = _dirichlet_gradient_ops(domain)
    geo = _sw_geometry(domain)
    bl = _bvals_at(domain, bvals, geo.link_comp, geo.link_pts)
    return Gx @ uv + Bx @ bl, Gy @ uv + By @ bl


def _free_gradient_ops(domain: Domain):
    """Gradient without boundary information.

    Centred differences where both axis neighbours are fluid cells and the
    connecting segments stay in the fluid; a least-squares quadratic fit
    elsewhere.
    """
    key = "fgrad"
    if key in domain._cache:
        return domain._cache[key]
    geo = _sw_geometry(domain)
    n, h = domain.n_fluid, domain.h
    mats = []
    for plus, minus, der in ((0, 1, 1), (2, 3, 2)):
        ok = (geo.nb[:, plus] >= 0) & (geo.nb[:, minus] >= 0)
        rows = [np.flatnonzero(ok)] * 2
        cols = [geo.nb[ok, plus], geo.nb[ok, minus]]
        vals = [np.full(ok.sum(), 0.5 / h), np.full(ok.sum(), -0.5 / h)]
        for i in np.flatnonzero(~ok):
            idx, w = ls_weights(domain, domain.centers[i], derivative=der)
            rows.append(np.full(len(idx), i))
            cols.append(idx)
            vals.append(w)
        mats.append(sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                      shape=(n, n)))
    domain._cache[key] = tuple(mats)
    return domain._cache[key]


def gradient(f) -> VectorField:
    """Cell-centred gradient of a field without boundary data."""
    d = f.domain
    Dx, Dy = _free_gradient_ops(d)
    return VectorField(d, Dx @ f.values, Dy @ f.values)


def divergence(v: VectorField) -> np.ndarray:
    Dx, Dy = _free_gradient_ops(v.domain)
    return Dx @ v.x + Dy @ v.y


def curl(v: VectorField) -> np.ndarray:
    Dx, Dy = _free_gradient_ops(v.domain)
    return Dx @ v.y - Dy @ v.x


# ---------------------------------------------------------------------------
# face fluxes of stream functions
# ---------------------------------------------------------------------------
#
# A face flux is the difference of the stream function between the two ends
# of every fluid piece of the face.  Piece ends are either grid nodes inside
# the fluid (values interpolated from cells and nearby boundary data) or
# points where a boundary curve crosses the face (values taken from the
# boundary data).  The part of the boundary inside a cell is split into arcs
# between consecutive crossings with grid lines; the flux through an arc is
# again a difference of boundary values.  Because every piece end is shared
# by exactly one face and one arc, face and arc fluxes of a cell add up to
# zero identically: the discrete velocity is exactly divergence free.


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def _segment_crossings(spec, P0, P1):
    """Sorted ``(t, component)`` crossings of the segment with boundary curves."""
    d = P1 - P0
    out = []
    circles = [(0, spec.outer)] if isinstance(spec.outer, Disk) else []
    circles += [(k + 1, Disk(tuple(hh.center), hh.radius)) for k, hh in enumerate(spec.holes)]
    a = float(d @ d)
    for cid, c in circles:
        q = P0 - np.asarray(c.center)
        b = float(d @ q)
        c0 = float(q @ q) - c.radius ** 2
        disc = b * b - a * c0
        if disc <= 0:
            continue
        r = math.sqrt(disc)
        for t in ((-b - r) / a, (-b + r) / a):
            if 0 < t < 1:
                out.append((t, cid))
    if not isinstance(spec.outer, Disk):
        R = spec.outer
        for k, (lo, hi) in enumerate(((R.xmin, R.xmax), (R.ymin, R.ymax))):
            if d[k] == 0:
                continue
            for wall in (lo, hi):
                t = (wall - P0[k]) / d[k]
                o = P0[1 - k] + t * d[1 - k]
                olo, ohi = (R.ymin, R.ymax) if k == 0 else (R.xmin, R.xmax)
                if 0 < t < 1 and olo <= o <= ohi:
                    out.append((t, 0))
    return sorted(out)


@dataclass
class _FaceGeometry:
    E_cell: sparse.csr_matrix  # faces x cells
    E_q: sparse.csr_matrix  # faces x all quadrature points
    E_c: sparse.csr_matrix  # faces x face crossings
    F_const: sparse.csr_matrix  # faces x components (per-component constants)
    dtheta: np.ndarray  # faces x holes, wrapped angle increments
    cross_comp: np.ndarray
    cross_pts: np.ndarray
    q_comp: np.ndarray
    q_pts: np.ndarray


def _node_rows(domain: Domain, nodes: np.ndarray):
    """Interpolation of node values from cells and nearby boundary data.

    Returns ``(Nc, Nq)`` with ``psi_node = Nc @ psi_cells + Nq @ b_q`` where
    ``b_q`` are boundary values at all quadrature points.
    """
    ny1 = domain.ny + 1
    ni, nj = nodes // ny1, nodes % ny1
    h = domain.h
    P = domain.origin + h * np.stack([ni, nj], axis=1).astype(float)
    sd, _ = domain.signed_distance(P)
    fi = domain.fluid_index
    nxm, nym = domain.nx, domain.ny
    surround = np.stack([fi[np.clip(ni - 1, 0, nxm - 1), np.clip(nj - 1, 0, nym - 1)],
                         fi[np.clip(ni, 0, nxm - 1), np.clip(nj - 1, 0, nym - 1)],
                         fi[np.clip(ni - 1, 0, nxm - 1), np.clip(nj, 0, nym - 1)],
                         fi[np.clip(ni, 0, nxm - 1), np.clip(nj, 0, nym - 1)]], axis=1)
    interior = np.all(surround >= 0, axis=1) & (sd > 1.5 * h)
    m = len(nodes)
    rows, cols, vals = [], [], []
    r_int = np.flatnonzero(interior)
    for k in range(4):
        rows.append(r_int)
        cols.append(surround[interior, k])
        vals.append(np.full(len(r_int), 0.25))
    bpts = domain.boundary_points
    qrows, qcols, qvals = [], [], []
    for r in np.flatnonzero(~interior):
        near = np.flatnonzero(np.hypot(*(bpts - P[r]).T) < 2.0 * h)
        idx, w, wb = ls_weights(domain, P[r], extra=bpts[near])
        rows.append(np.full(len(idx), r))
        cols.append(idx)
        vals.append(w)
        qrows.append(np.full(len(near), r))
        qcols.append(near)
        qvals.append(wb)
    cat = np.concatenate
    Nc = sparse.csr_matrix((cat(vals), (cat(rows), cat(cols))), shape=(m, domain.n_fluid))
    if qrows:
        Nq = sparse.csr_matrix((cat(qvals), (cat(qrows), cat(qcols))), shape=(m, len(bpts)))
    else:
        Nq = sparse.csr_matrix((m, len(bpts)))
    return Nc, Nq


def _face_geometry(domain: Domain) -> _FaceGeometry:
    key = "face_geometry"
    if key in domain._cache:
        return domain._cache[key]
    f = domain.faces
    h = domain.h
    ny1 = domain.ny + 1
    node_xy = lambda k: domain.origin + h * np.array([k // ny1, k % ny1], dtype=float)  # noqa: E731
    centers = [np.asarray(hh.center, float) for hh in domain.spec.holes]
    nh = len(centers)
    nf = f.n

    full = np.abs(f.aperture - h) <= 1e-12 * h
    ef, es, en = [np.flatnonzero(full)] * 2, [np.ones(full.sum()), -np.ones(full.sum())], \
        [f.n1[full], f.n0[full]]
    ef, es, en = list(ef), list(es), list(en)
    cf, cs, cc, cp = [], [], [], []
    dtheta = np.zeros((nf, nh))
    # angle increments along full faces (vectorised)
    P1 = np.stack([f.n1 // ny1, f.n1 % ny1], axis=1) * h + domain.origin
    P0 = np.stack([f.n0 // ny1, f.n0 % ny1], axis=1) * h + domain.origin
    for k, c in enumerate(centers):
        dtheta[full, k] = _wrap(np.arctan2(*(P1[full] - c)[:, ::-1].T)
                                - np.arctan2(*(P0[full] - c)[:, ::-1].T))
    for i in np.flatnonzero(~full):
        p0, p1 = P0[i], P1[i]
        inside = domain.signed_distance(p0)[0] > 0
        start = ("node", f.n0[i], p0) if inside else None
        pieces = []
        for t, cid in _segment_crossings(domain.spec, p0, p1):
            pt = p0 + t * (p1 - p0)
            if inside:
                pieces.append((start, ("cross", cid, pt)))
                inside = False
            else:
                start = ("cross", cid, pt)
                inside = True
        if inside:
            pieces.append((start, ("node", f.n1[i], p1)))
        for a_end, b_end in pieces:
            for end, sgn in ((b_end, 1.0), (a_end, -1.0)):
                if end[0] == "node":
                    ef.append(np.array([i]))
                    es.append(np.array([sgn]))
                    en.append(np.array([end[1]]))
                else:
                    cf.append(i)
                    cs.append(sgn)
                    cc.append(end[1])
                    cp.append(end[2])
            for k, c in enumerate(centers):
                dtheta[i, k] += _wrap(math.atan2(*(b_end[2] - c)[::-1]) - math.atan2(*(a_end[2] - c)[::-1]))
    ef, es, en = map(np.concatenate, (ef, es, en))
    # nodes lying on a boundary curve take the boundary value
    npts = np.stack([en // ny1, en % ny1], axis=1) * h + domain.origin
    nsd, ncomp_ = domain.signed_distance(npts)
    onb = nsd <= 1e-10 * h
    for k in np.flatnonzero(onb):
        cf.append(ef[k])
        cs.append(es[k])
        cc.append(ncomp_[k])
        cp.append(npts[k])
    ef, es, en = ef[~onb], es[~onb], en[~onb]
    nodes, inv = np.unique(en, return_inverse=True)
    Enode = sparse.csr_matrix((es, (ef, inv)), shape=(nf, len(nodes)))
    Nc, Nq = _node_rows(domain, nodes)
    cross_comp = np.asarray(cc, dtype=int)
    cross_pts = np.asarray(cp, dtype=float).reshape(-1, 2)
    Ec = sparse.csr_matrix((np.asarray(cs), (np.asarray(cf, dtype=int), np.arange(len(cf)))),
                           shape=(nf, len(cf)))
    q_comp = np.concatenate([np.full(c.n_q, c.id) for c in domain.components])
    q_pts = domain.boundary_points
    E_cell = (Enode @ Nc).tocsr()
    E_q = (Enode @ Nq).tocsr()
    ncomp = len(domain.components)
    Pq = sparse.csr_matrix((np.ones(len(q_comp)), (np.arange(len(q_comp)), q_comp)),
                           shape=(len(q_comp), ncomp))
    Pc = sparse.csr_matrix((np.ones(len(cross_comp)), (np.arange(len(cross_comp)), cross_comp)),
                           shape=(len(cross_comp), ncomp))
    F_const = (E_q @ Pq + Ec @ Pc).tocsr()
    geo = _FaceGeometry(E_cell, E_q, Ec, F_const, dtheta, cross_comp, cross_pts, q_comp, q_pts)
    domain._cache[key] = geo
    return geo


def stream_face_fluxes(domain: Domain, psi: np.ndarray, consts=None, bvals=None,
                       theta_coeff=None) -> np.ndarray:
    """Volume fluxes of ``perp-grad(Psi)`` through the faces.

    ``Psi = psi`` in the cells with boundary values given either as
    per-component constants ``consts`` (fast path) or general ``bvals``, plus
    an optional multivalued part ``sum_j theta_coeff[j] * arg(x - c_j)``.
    """
    geo = _face_geometry(domain)
    F = geo.E_cell @ psi
    if consts is not None:
        F = F + geo.F_const @ np.asarray(consts, float)
    if bvals is not None:
        F = F + geo.E_q @ _bvals_at(domain, bvals, geo.q_comp, geo.q_pts)
        F = F + geo.E_c @ _bvals_at(domain, bvals, geo.cross_comp, geo.cross_pts)
    if theta_coeff is not None and len(theta_coeff):
        F = F + geo.dtheta @ np.asarray(theta_coeff, float)
    return F


def face_divergence(domain: Domain, F: np.ndarray) -> np.ndarray:
    """Net outflow of each merged cell from face fluxes ``F`` (a to b positive)."""
    f = domain.faces
    out = np.zeros(domain.n_fluid)
    np.add.at(out, f.a, F)
    np.subtract.at(out, f.b, F)
    return out


@dataclass
class Arcs:
    """Pieces of a circular boundary curve between consecutive grid-line crossings.

    Angles are measured about the circle centre with ``theta_a < theta_b``
    (counterclockwise); ``cell`` is the merged fluid cell containing the arc
    and ``sign`` converts ``Psi(b) - Psi(a)`` into the outflow (+1 on holes,
    -1 on the outer circle).
    """

    component: int
    theta_a: np.ndarray
    theta_b: np.ndarray
    pa: np.ndarray
    pb: np.ndarray
    mid: np.ndarray
    cell: np.ndarray
    sign: float
    radius: float

    @property
    def length(self):
        return (self.theta_b - self.theta_a) * self.radius


def boundary_arcs(domain: Domain) -> list:
    """Arcs of every circular boundary curve (cached); rectangles carry none."""
    key = "arcs"
    if key in domain._cache:
        return domain._cache[key]
    h = domain.h
    out = []
    for comp in domain.components:
        if not comp.is_circle:
            continue
        (cx, cy), r = comp.shape.center, comp.shape.radius
        angles = []
        for axis, c_ax in ((0, cx), (1, cy)):
            o = domain.origin[axis]
            k0 = int(math.ceil((c_ax - r - o) / h))
            k1 = int(math.floor((c_ax + r - o) / h))
            lines = o + h * np.arange(k0, k1 + 1)
            s2 = r * r - (lines - c_ax) ** 2
            lines, s = lines[s2 > 0], np.sqrt(s2[s2 > 0])
            for sgn in (1, -1):
                if axis == 0:
                    angles.append(np.arctan2(sgn * s, lines - cx))
                else:
                    angles.append(np.arctan2(lines - cy, sgn * s))
        th = np.sort(np.mod(np.concatenate(angles), 2 * math.pi))
        keep = np.concatenate([[True], np.diff(th) > 1e-12])
        th = th[keep]
        ta = th
        tb = np.concatenate([th[1:], [th[0] + 2 * math.pi]])
        tm = 0.5 * (ta + tb)
        ctr = np.array([cx, cy])
        pt = lambda t: ctr + r * np.stack([np.cos(t), np.sin(t)], axis=1)  # noqa: E731
        mid = pt(tm)
        # host: the merged cell of the grid cell holding the fluid side of the arc
        inward = (ctr - mid) / r if comp.id == 0 else (mid - ctr) / r
        probe = mid + 1e-9 * h * inward
        ij = np.floor((probe - domain.origin) / h).astype(int)
        cell = domain.host[ij[:, 0], ij[:, 1]]
        if np.any(cell < 0):
            raise SolverError("boundary arc outside every merged cell")
        out.append(Arcs(comp.id, ta, tb, pt(ta), pt(tb), mid, cell,
                        -1.0 if comp.id == 0 else 1.0, r))
    domain._cache[key] = out
    return out


def arc_outflow(domain: Domain, bvals, theta_coeff) -> list:
    """Outflow through every boundary arc of ``perp-grad(Psi)``.

    ``Psi`` has boundary values ``bvals`` and multivalued part
    ``sum_j theta_coeff[j] * arg(x - c_j)``.  Returns one array per entry of
    :func:`boundary_arcs`.
    """
    centers = [np.asarray(hh.center, float) for hh in domain.spec.holes]
    out = []
    for arcs in boundary_arcs(domain):
        comp = np.full(len(arcs.cell), arcs.component)
        flux = (_bvals_at(domain, bvals, comp, arcs.pb) - _bvals_at(domain, bvals, comp, arcs.pa))
        for k, c in enumerate(centers):
            if theta_coeff[k] != 0.0:
                flux = flux + theta_coeff[k] * _wrap(np.arctan2(*(arcs.pb - c)[:, ::-1].T)
                                                     - np.arctan2(*(arcs.pa - c)[:, ::-1].T))
        out.append(arcs.sign * flux)
    return out


def arc_divergence(domain: Domain, arc_fluxes) -> np.ndarray:
    out = np.zeros(domain.n_fluid)
    for arcs, fl in zip(boundary_arcs(domain), arc_fluxes):
        np.add.at(out, arcs.cell, fl)
    return out


def boundary_cell_flux(domain: Domain, traces) -> np.ndarray:
    """Per-cell sum of ``g w`` over the quadrature points hosted by each cell."""
    out = np.zeros(domain.n_fluid)
    for tr in traces:
        c = domain.components[tr.component]
        np.add.at(out, c.cells, tr.values * c.weights)
    return out


def _as_traces(domain: Domain, g):
    if g is None:
        return []
    if isinstance(g, BoundaryTrace):
        return [g]
    if isinstance(g, PotentialLift):
        return list(g.traces)
    return [t for t in g if t is not None]


# ---------------------------------------------------------------------------
# harmonic basis and cut-off fluxes
# ---------------------------------------------------------------------------


def _smooth_step(t):
    """``p(t) = 35 t^4 - 84 t^5 + 70 t^6 - 20 t^7`` with first two derivatives."""
    t = np.clip(t, 0.0, 1.0)
    p = t ** 4 * (35 - 84 * t + 70 * t ** 2 - 20 * t ** 3)
    dp = 140 * t ** 3 * (1 - t) ** 3
    d2p = 420 * t ** 2 * (1 - t) ** 2 * (1 - 2 * t)
    return p, dp, d2p


def cutoff(domain: Domain, j: int, pts=None):
    """Cut-off ``chi_j`` of hole ``j`` (1-based id) and its Laplacian.

    ``chi_j = 1`` near hole ``j`` and ``0`` near every other boundary curve;
    the transition occupies the middle 60% of the gap around the hole.
    """
    comp = domain.components[j]
    c, r = np.asarray(comp.shape.center), comp.shape.radius
    a, b = _cutoff_band(domain, j)
    P = domain.centers if pts is None else np.asarray(pts)
    rad = np.hypot(*(P - c).T)
    t = (rad - r - a) / (b - a)
    p, dp, d2p = _smooth_step(t)
    chi = 1 - p
    dchi = -dp / (b - a)
    d2chi = -d2p / (b - a) ** 2
    lap = d2chi + dchi / np.maximum(rad, 1e-300)
    return chi, lap


def _cutoff_band(domain: Domain, j: int):
    spec = domain.spec
    hole = spec.holes[j - 1]
    o = spec.outer
    if isinstance(o, Disk):
        gap = o.radius - math.dist(o.center, hole.center) - hole.radius
    else:
        cx, cy = hole.center
        gap = min(cx - o.xmin, o.xmax - cx, cy - o.ymin, o.ymax - cy) - hole.radius
    for k, other in enumerate(spec.holes):
        if k != j - 1:
            gap = min(gap, math.dist(other.center, hole.center) - other.radius - hole.radius)
    return 0.2 * gap, 0.8 * gap


def _cutoff_tables(domain: Domain):
    key = "cutoffs"
    if key not in domain._cache:
        chis, laps = [], []
        for j in range(1, len(domain.components)):
            chi, lap = cutoff(domain, j)
            chis.append(chi * domain.volumes)
            laps.append(lap * domain.volumes)
        domain._cache[key] = (np.array(chis).reshape(-1, domain.n_fluid),
                              np.array(laps).reshape(-1, domain.n_fluid))
    return domain._cache[key]


def hole_fluxes(domain: Domain, psi: np.ndarray, lap_psi: np.ndarray | None = None) -> np.ndarray:
    """``flux_j = oint_{hole j} d psi/dn`` for every hole (``n`` into the hole).

    Equals the circulation of ``perp-grad(psi)`` around hole ``j``.
    """
    chiV, lapV = _cutoff_tables(domain)
    out = -(lapV @ psi)
    if lap_psi is not None:
        out = out + chiV @ lap_psi
    return out


@dataclass
class HarmonicBasis:
    """Harmonic functions ``psi_j`` and the (symmetrised) period matrix."""

    psi: list
    period_matrix: np.ndarray
    raw_period_matrix: np.ndarray
    A: np.ndarray = field(repr=False)  # inverse of the period matrix

    @property
    def asymmetry(self) -> float:
        M = self.raw_period_matrix
        return float(np.max(np.abs(M - M.T)) / np.max(np.abs(M)))


def harmonic_basis(domain: Domain) -> HarmonicBasis:
    """Solve for ``psi_j`` and assemble the period matrix ``M``.

    The raw cut-off quadrature of ``M`` is symmetric only up to the
    discretisation error; the stored matrix is its symmetric part (the raw
    matrix and its relative asymmetry are kept for reporting).

    Raises
    ------
    SingularMatrixError
        If ``M`` is not numerically positive definite.
    """
    key = "basis"
    if key in domain._cache:
        return domain._cache[key]
    N = domain.n_holes
    psis = []
    for j in range(1, N + 1):
        bv = [0.0] * (N + 1)
        bv[j] = 1.0
        psis.append(solve_poisson_dirichlet(domain, 0.0, bv))
    raw = np.array([hole_fluxes(domain, p.values) for p in psis]).T.reshape(N, N)  # raw[j, k]
    M = 0.5 * (raw + raw.T)
    if N:
        ev = np.linalg.eigvalsh(M)
        if ev.min() <= 1e-12 * max(ev.max(), 1e-300):
            raise SingularMatrixError(f"period matrix not positive definite: {ev}")
        A = np.linalg.inv(M)
    else:
        A = np.zeros((0, 0))
    basis = HarmonicBasis(psis, M, raw, A)
    domain._cache[key] = basis
    return basis


# ---------------------------------------------------------------------------
# potential lift
# ---------------------------------------------------------------------------
#
# v_g is harmonic, so it is also the perpendicular gradient of a (multivalued)
# stream function
#     Psi_g = sum_j Q_j / (2 pi) arg(x - c_j) + psi_t,
# where Q_j is the flux of g through hole j and c_j its centre.  Along each
# curve dPsi_g/ds = +g (holes, s counterclockwise) or -g (outer curve), which
# fixes the boundary values of the single-valued part psi_t up to a constant
# per component; the constants are chosen so that v_g has no circulation.
# The potential itself is phi_g = -sum_j Q_j/(2 pi) log|x - c_j| + phi_t with
# grad(phi_t) = perp-grad(psi_t), recovered by least-squares integration.


def _fourier_primitive(comp, g):
    """Periodic part of ``int r g d(alpha)`` for samples at uniform angles."""
    n = len(g)
    a = np.fft.rfft(comp.shape.radius * np.asarray(g, float)) / n
    m = np.arange(len(a))
    top = len(a) - 1 if n % 2 == 0 else len(a)
    coef = np.zeros(len(a), complex)
    coef[1:top] = 2 * a[1:top] / (1j * m[1:top])

    def prim(alpha):
        alpha = np.asarray(alpha, float)
        return np.real(np.exp(1j * np.multiply.outer(alpha, m[1:top])) @ coef[1:top])

    return prim


@dataclass
class PotentialLift:
    """Potential lift ``v_g`` of boundary fluxes ``g`` with all its discrete forms."""

    traces: list
    Q: np.ndarray
    psi: np.ndarray
    bvals: dict
    phi: ScalarField
    v: VectorField
    face_flux: np.ndarray
    arc_flux: list

    @property
    def theta_coeff(self) -> np.ndarray:
        return self.Q / (2 * math.pi)

    def scaled(self, e: float):
        """Face and arc fluxes multiplied by a scalar envelope."""
        return e * self.face_flux, [e * a for a in self.arc_flux]


def _integrator(domain: Domain):
    key = "integrator"
    if key not in domain._cache:
        geo = _sw_geometry(domain)
        n = domain.n_fluid
        ii, jj, dd = [], [], []
        for d in (0, 2):
            ok = geo.nb[:, d] >= 0
            ii.append(np.flatnonzero(ok))
            jj.append(geo.nb[ok, d])
            dd.append(np.full(ok.sum(), d // 2))
        ii, jj, dd = map(np.concatenate, (ii, jj, dd))
        m = len(ii)
        B = sparse.csr_matrix((np.concatenate([-np.ones(m), np.ones(m)]),
                               (np.concatenate([np.arange(m)] * 2), np.concatenate([ii, jj]))), shape=(m, n))
        K = (B.T @ B).tocsr()
        V = domain.volumes[:, None]
        A = sparse.bmat([[K, sparse.csr_matrix(V)], [sparse.csr_matrix(V.T), None]], format="csc")
        domain._cache[key] = (B, ii, jj, dd, spla.splu(A, permc_spec="COLAMD"))
    return domain._cache[key]


def integrate_gradient(domain: Domain, wx, wy) -> np.ndarray:
    """Zero-mean potential whose gradient best matches ``(wx, wy)``.

    Least squares over the axis edges between neighbouring fluid cells with
    trapezoidal edge increments.
    """
    B, ii, jj, dd, lu = _integrator(domain)
    w = np.stack([wx, wy])
    e = 0.5 * domain.h * (w[dd, ii] + w[dd, jj])
    sol = lu.solve(np.concatenate([B.T @ e, [0.0]]))
    return sol[:-1]


def _lift_boundary_functions(domain: Domain, traces_by_comp, Q):
    """Boundary values of the single-valued stream part, one callable per curve."""
    centers = [np.asarray(hh.center, float) for hh in domain.spec.holes]
    coeff = Q / (2 * math.pi)
    funcs = {}
    for comp in domain.components:
        g = traces_by_comp.get(comp.id)
        if comp.id == 0:
            if comp.is_circle:
                ctr = np.asarray(comp.shape.center, float)
                prim = _fourier_primitive(comp, g) if g is not None else None
            else:
                R = comp.shape
                ctr = np.array([0.5 * (R.xmin + R.xmax), 0.5 * (R.ymin + R.ymax)])
                prim = None

            def f0(x, y, ctr=ctr, prim=prim):
                alpha = np.arctan2(y - ctr[1], x - ctr[0])
                val = -prim(alpha) if prim is not None else np.zeros_like(alpha)
                for k, c in enumerate(centers):
                    val = val - coeff[k] * _wrap(np.arctan2(y - c[1], x - c[0]) - alpha)
                return val

            funcs[0] = f0
        else:
            ck = centers[comp.id - 1]
            prim = _fourier_primitive(comp, g) if g is not None else (lambda a: np.zeros_like(a))
            ref = [math.atan2(*(ck - c)[::-1]) for c in centers]

            def fk(x, y, ck=ck, prim=prim, ref=ref, me=comp.id - 1):
                val = prim(np.arctan2(y - ck[1], x - ck[0]))
                for k, c in enumerate(centers):
                    if k != me:
                        val = val - coeff[k] * (ref[k] + _wrap(np.arctan2(y - c[1], x - c[0]) - ref[k]))
                return val

            funcs[comp.id] = fk
    return funcs


def potential_lift_data(domain: Domain, g, basis: HarmonicBasis | None = None) -> PotentialLift:
    """Assemble the potential lift of the boundary fluxes ``g``.

    Raises
    ------
    CompatibilityError
        If the total flux exceeds ``1e-8``.
    """
    traces = _as_traces(domain, g)
    by_comp = {}
    for tr in traces:
        by_comp[tr.component] = by_comp.get(tr.component, 0.0) + tr.values
    flux = {k: float(np.dot(v, domain.components[k].weights)) for k, v in by_comp.items()}
    total = sum(flux.values())
    if abs(total) > 1e-8:
        raise CompatibilityError(f"boundary data have total flux {total:.3e}")
    if 0 in by_comp and not domain.components[0].is_circle and np.any(by_comp[0] != 0):
        raise CompatibilityError("the rectangular outer wall must be impermeable")
    N = domain.n_holes
    Q = np.array([flux.get(k, 0.0) for k in range(1, N + 1)])
    basis = basis if basis is not None else harmonic_basis(domain)
    funcs = _lift_boundary_functions(domain, by_comp, Q)
    psi0 = _dirichlet_solve(domain, np.zeros(domain.n_fluid), funcs)
    c = -basis.A @ hole_fluxes(domain, psi0) if N else np.zeros(0)
    psi = psi0 + sum((ck * p.values for ck, p in zip(c, basis.psi)), np.zeros(domain.n_fluid))
    consts = np.concatenate([[0.0], c])
    bvals = {k: (lambda x, y, f=f, a=consts[k]: f(x, y) + a) for k, f in funcs.items()}
    gx, gy = dirichlet_gradient(domain, psi, bvals)
    vx, vy = -gy, gx
    phi_s = np.zeros(domain.n_fluid)
    X = domain.centers
    for k, hh in enumerate(domain.spec.holes):
        d = X - np.asarray(hh.center)
        r2 = np.sum(d * d, axis=1)
        vx = vx - Q[k] / (2 * math.pi) * d[:, 0] / r2
        vy = vy - Q[k] / (2 * math.pi) * d[:, 1] / r2
        phi_s -= Q[k] / (2 * math.pi) * 0.5 * np.log(r2)
    phi = phi_s + integrate_gradient(domain, -gy, gx)
    phi -= np.dot(domain.volumes, phi) / domain.volumes.sum()
    theta = Q / (2 * math.pi)
    F = stream_face_fluxes(domain, psi, bvals=bvals, theta_coeff=theta)
    arcs = arc_outflow(domain, bvals, theta)
    return PotentialLift(traces, Q, psi, bvals, ScalarField(domain, phi), VectorField(domain, vx, vy),
                         F, arcs)


def solve_laplace_neumann(domain: Domain, g) -> ScalarField:
    """Zero-mean harmonic potential with ``d phi / dn = g`` (``n`` leaving the fluid).

    Parameters
    ----------
    g : BoundaryTrace or list of BoundaryTrace
        Normal velocity on the listed components; missing components carry
        zero flux.

    Raises
    ------
    CompatibilityError
        If the total flux exceeds ``1e-8``.
    """
    if not _as_traces(domain, g):
        return domain.scalar(0.0)
    return potential_lift_data(domain, g).phi


def potential_lift(domain: Domain, g) -> VectorField:
    """The potential lift ``v_g = grad(phi_g)`` as a cell-centred field."""
    if not _as_traces(domain, g):
        return VectorField.zeros(domain)
    return potential_lift_data(domain, g).v


def _perp_grad(domain: Domain, psi: np.ndarray, consts) -> VectorField:
    gx, gy = dirichlet_gradient(domain, psi, list(consts))
    return VectorField(domain, -gy, gx)


def harmonic_stream(domain: Domain, basis: HarmonicBasis, i: int):
    """Stream function of ``X_i`` (0-based ``i``) and its boundary constants."""
    coeff = basis.A[:, i]
    psi = sum(c * p.values for c, p in zip(coeff, basis.psi))
    consts = np.concatenate([[0.0], coeff])
    return psi, consts


def harmonic_fields(domain: Domain, basis: HarmonicBasis) -> list:
    """Harmonic fields ``X_i`` with unit circulation around hole ``i`` only."""
    out = []
    for i in range(domain.n_holes):
        psi, consts = harmonic_stream(domain, basis, i)
        out.append(_perp_grad(domain, psi, consts))
    return out


def biot_savart_stream(domain: Domain, omega: np.ndarray, basis: HarmonicBasis):
    """Stream function of ``K_H[omega]`` and its boundary constants."""
    psi0 = _dirichlet_solve(domain, omega, 0.0)
    flux0 = hole_fluxes(domain, psi0, omega)
    c = -basis.A @ flux0
    psi = psi0 + sum(ck * p.values for ck, p in zip(c, basis.psi))
    return psi, np.concatenate([[0.0], c])


def biot_savart(domain: Domain, omega, basis: HarmonicBasis) -> VectorField:
    """Hydrodynamical Biot-Savart velocity ``K_H[omega]``.

    Divergence free, tangent to the boundary, ``curl = omega`` and zero
    circulation around every hole.
    """
    w = omega.values if isinstance(omega, ScalarField) else np.asarray(omega, float)
    psi, consts = biot_savart_stream(domain, w, basis)
    return _perp_grad(domain, psi, consts)


@dataclass
class VelocityDecomposition:
    v_g: VectorField
    X: list
    k_h: VectorField
    circulations: np.ndarray

    @property
    def v(self) -> VectorField:
        out = self.v_g + self.k_h
        for c, x in zip(self.circulations, self.X):
            out = out + c * x
        return out


def decompose_velocity(domain, omega, g, C, basis) -> VelocityDecomposition:
    if isinstance(g, PotentialLift):
        v_g = g.v
    else:
        v_g = potential_lift_data(domain, g, basis).v if _as_traces(domain, g) else VectorField.zeros(domain)
    X = harmonic_fields(domain, basis)
    k_h = biot_savart(domain, omega, basis)
    return VelocityDecomposition(v_g, X, k_h, np.asarray(C, float))


def reconstruct_velocity(domain, omega, g, C, basis) -> VectorField:
    """``v = v_g + sum_i C_i X_i + K_H[omega]``."""
    return decompose_velocity(domain, omega, g, C, basis).v


def kernel_column(domain: Domain, y, basis: HarmonicBasis) -> VectorField:
    """Approximate ``K(., y)`` by the Biot-Savart velocity of a discrete delta.

    Raises
    ------
    PointOutsideFluid
        If ``y`` is not inside a fluid cell.
    """
    i = domain.fluid_cell_of(y)
    w = np.zeros(domain.n_fluid)
    w[i] = 1.0 / domain.volumes[i]
    return biot_savart(domain, w, basis)


def free_space_kernel(x, y):
    """``(x - y)^perp / (2 pi |x - y|^2)``."""
    d = np.asarray(x, float) - np.asarray(y, float)
    r2 = np.sum(d * d, axis=-1)
    return np.stack([-d[..., 1], d[..., 0]], axis=-1) / (2 * math.pi * r2[..., None])
