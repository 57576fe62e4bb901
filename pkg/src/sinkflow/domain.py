"""Perforated planar domains on a Cartesian grid.

The geometry family is a disk or an axis-aligned rectangle with disjoint
circular holes removed.  Each hole is tagged as a *source* (fluid enters the
flow region through it) or a *sink* (fluid leaves).  The fluid region is
discretised on a uniform cell-centred grid that covers the bounding box of the
outer curve plus a two-cell pad.

Besides the cell classification, :func:`build_domain` computes the exact
cut-cell geometry (fluid area of every cell and fluid length of every cell
face).  Cells whose centre is solid but which still contain a sliver of fluid
are merged into a neighbouring fluid cell, so that the merged volumes add up
to the area of the fluid region.  The finite-volume operators of the
transport and Neumann solvers are assembled on these merged cells.

Orientation conventions
-----------------------
``n`` is the unit normal leaving the fluid region (into a hole, or out of the
outer curve).  ``tau = n^perp = (-n_y, n_x)`` keeps the fluid on its left:
it runs counterclockwise along the outer curve and clockwise around holes.
With this choice the circulation ODE reads ``C_i' = -int omega g ds`` and the
total vorticity equals the sum of all boundary circulations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, sparse

from .errors import ExtrapolationError, GeometryError, PointOutsideFluid


class Kind(str, enum.Enum):
    """Boundary component tag."""

    OUTER = "outer"
    SOURCE = "source"
    SINK = "sink"


class CellClass(enum.IntEnum):
    """Per-cell tag of the Cartesian grid."""

    SOLID = 0
    FLUID = 1
    NEAR_BOUNDARY = 2


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    ymin: float
    xmax: float
    ymax: float


@dataclass(frozen=True)
class Hole:
    center: tuple[float, float]
    radius: float
    kind: Kind

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))


@dataclass(frozen=True)
class DomainSpec:
    """Geometry description: outer curve, holes, and cells per axis."""

    outer: Disk | Rectangle
    holes: tuple[Hole, ...]
    grid_n: int

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))

    def refined(self, factor: int = 2) -> "DomainSpec":
        return DomainSpec(self.outer, self.holes, self.grid_n * factor)

    def with_grid(self, grid_n: int) -> "DomainSpec":
        return DomainSpec(self.outer, self.holes, int(grid_n))


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


@dataclass
class ScalarField:
    """Values on the fluid cells of a domain (one per merged fluid cell)."""

    domain: "Domain"
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.domain.n_fluid,):
            raise ValueError(
                f"expected {self.domain.n_fluid} values, got {self.values.shape}"
            )

    def grid(self, fill: float = np.nan) -> np.ndarray:
        """Return the field as an ``(nx, ny)`` array, ``fill`` off the fluid."""
        out = np.full((self.domain.nx, self.domain.ny), fill)
        out[self.domain.cells[:, 0], self.domain.cells[:, 1]] = self.values
        return out

    def integral(self) -> float:
        return float(np.dot(self.domain.volumes, self.values))

    def __add__(self, other):
        return ScalarField(self.domain, self.values + _vals(other))

    def __sub__(self, other):
        return ScalarField(self.domain, self.values - _vals(other))

    def __mul__(self, a):
        return ScalarField(self.domain, self.values * _vals(a))

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, ScalarField) else x


@dataclass
class VectorField:
    """Cell-centred vector field stored as two component arrays."""

    domain: "Domain"
    x: np.ndarray
    y: np.ndarray

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.x, self.y)

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.domain, self.x + other.x, self.y + other.y)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.domain, self.x - other.x, self.y - other.y)

    def __mul__(self, a: float) -> "VectorField":
        return VectorField(self.domain, a * self.x, a * self.y)

    __rmul__ = __mul__

    @classmethod
    def zeros(cls, domain: "Domain") -> "VectorField":
        return cls(domain, np.zeros(domain.n_fluid), np.zeros(domain.n_fluid))


@dataclass
class BoundaryTrace:
    """Values at the quadrature points of one boundary component."""

    component: int
    values: np.ndarray
    time: float = 0.0
    owner: "BoundaryComponent | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


# ---------------------------------------------------------------------------
# boundary components
# ---------------------------------------------------------------------------


@dataclass
class BoundaryComponent:
    """One closed boundary curve with its quadrature rule.

    Attributes
    ----------
    id : int
        0 for the outer curve, ``k + 1`` for the k-th hole of the spec.
    kind : Kind
    points, normals, tangents : ndarray, shape (n_q, 2)
    weights : ndarray, shape (n_q,)
        Arclength weights; they sum to the perimeter.
    s : ndarray
        Arclength coordinate of each point.
    """

    id: int
    kind: Kind
    shape: Disk | Rectangle
    perimeter: float
    points: np.ndarray
    weights: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    s: np.ndarray
    cells: np.ndarray = field(default=None, repr=False)  # host fluid cell per point

    @property
    def n_q(self) -> int:
        return len(self.weights)

    @property
    def is_circle(self) -> bool:
        return isinstance(self.shape, Disk)

    @property
    def theta(self) -> np.ndarray:
        """Polar angle of the points about the circle centre."""
        c = self.shape.center
        return np.arctan2(self.points[:, 1] - c[1], self.points[:, 0] - c[0])

    def parametrization(self, s):
        """Point at arclength ``s`` (counterclockwise from angle 0 / lower-left)."""
        s = np.asarray(s, dtype=float)
        if self.is_circle:
            c, r = self.shape.center, self.shape.radius
            th = s / r
            return np.stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th)], axis=-1)
        R = self.shape
        w, hgt = R.xmax - R.xmin, R.ymax - R.ymin
        s = np.mod(s, self.perimeter)
        x = np.where(s < w, R.xmin + s, np.where(s < w + hgt, R.xmax,
                     np.where(s < 2 * w + hgt, R.xmax - (s - w - hgt), R.xmin)))
        y = np.where(s < w, R.ymin, np.where(s < w + hgt, R.ymin + (s - w),
                     np.where(s < 2 * w + hgt, R.ymax, R.ymax - (s - 2 * w - hgt))))
        return np.stack([x, y], axis=-1)

    def trace(self, values, time: float = 0.0) -> BoundaryTrace:
        return BoundaryTrace(self.id, values, time, owner=self)

    def evaluate(self, fn, time: float = 0.0) -> BoundaryTrace:
        """Sample ``fn(x, y)`` at the quadrature points."""
        vals = fn(self.points[:, 0], self.points[:, 1])
        return BoundaryTrace(self.id, np.broadcast_to(vals, (self.n_q,)).copy(), time, owner=self)


def _quad_count(perimeter: float, h: float) -> int:
    n = max(64, int(math.ceil(2.0 * perimeter / h)))
    return 8 * int(math.ceil(n / 8))


def _circle_component(cid, kind, disk, h, outward_radial):
    r = disk.radius
    per = 2 * math.pi * r
    n = _quad_count(per, h)
    th = 2 * math.pi * np.arange(n) / n
    rad = np.stack([np.cos(th), np.sin(th)], axis=1)
    pts = np.asarray(disk.center) + r * rad
    nrm = rad if outward_radial else -rad
    tng = np.stack([-nrm[:, 1], nrm[:, 0]], axis=1)
    return BoundaryComponent(cid, kind, disk, per, pts, np.full(n, per / n), nrm, tng, r * th)


def _rect_component(rect, h):
    w, hgt = rect.xmax - rect.xmin, rect.ymax - rect.ymin
    pts, nrm, wts, ss = [], [], [], []
    s0 = 0.0
    sides = [
        (w, (rect.xmin, rect.ymin), (1, 0), (0, -1)),
        (hgt, (rect.xmax, rect.ymin), (0, 1), (1, 0)),
        (w, (rect.xmax, rect.ymax), (-1, 0), (0, 1)),
        (hgt, (rect.xmin, rect.ymax), (0, -1), (-1, 0)),
    ]
    for length, start, d, nvec in sides:
        m = max(16, int(math.ceil(2 * length / h)))
        t = (np.arange(m) + 0.5) * length / m
        pts.append(np.asarray(start) + t[:, None] * np.asarray(d, float))
        nrm.append(np.tile(np.asarray(nvec, float), (m, 1)))
        wts.append(np.full(m, length / m))
        ss.append(s0 + t)
        s0 += length
    nrm = np.concatenate(nrm)
    tng = np.stack([-nrm[:, 1], nrm[:, 0]], axis=1)
    return BoundaryComponent(0, Kind.OUTER, rect, 2 * (w + hgt), np.concatenate(pts),
                             np.concatenate(wts), nrm, tng, np.concatenate(ss))


# ---------------------------------------------------------------------------
# elementary geometry
# ---------------------------------------------------------------------------


def _signed_distances(spec: DomainSpec, x, y):
    """Signed distance to each boundary curve (positive on the fluid side).

    Returns an array of shape ``(n_components,) + x.shape``.
    """
    out = []
    o = spec.outer
    if isinstance(o, Disk):
        out.append(o.radius - np.hypot(x - o.center[0], y - o.center[1]))
    else:
        dx = np.maximum(o.xmin - x, x - o.xmax)
        dy = np.maximum(o.ymin - y, y - o.ymax)
        outside = np.hypot(np.maximum(dx, 0), np.maximum(dy, 0))
        inside = np.minimum(np.maximum(dx, dy), 0)
        out.append(-(outside + inside))
    for hole in spec.holes:
        out.append(np.hypot(x - hole.center[0], y - hole.center[1]) - hole.radius)
    return np.stack(out)


def _overlap(a, b, lo, hi):
    return np.clip(np.minimum(b, hi) - np.maximum(a, lo), 0.0, None)


def _fluid_length(spec: DomainSpec, const, a, b, vertical: bool):
    """Length of the fluid part of axis-aligned segments.

    ``vertical=True``: segments ``x = const, y in [a, b]``; otherwise
    ``y = const, x in [a, b]``.
    """
    const = np.asarray(const, float)
    o = spec.outer
    ax, ay = (0, 1) if vertical else (1, 0)
    if isinstance(o, Disk):
        s = np.sqrt(np.clip(o.radius ** 2 - (const - o.center[ax]) ** 2, 0, None))
        length = _overlap(a, b, o.center[ay] - s, o.center[ay] + s)
    else:
        lo_c, hi_c = (o.xmin, o.xmax) if vertical else (o.ymin, o.ymax)
        lo, hi = (o.ymin, o.ymax) if vertical else (o.xmin, o.xmax)
        inside = (const > lo_c) & (const < hi_c)
        length = np.where(inside, _overlap(a, b, lo, hi), 0.0)
    for hole in spec.holes:
        s2 = hole.radius ** 2 - (const - hole.center[ax]) ** 2
        s = np.sqrt(np.clip(s2, 0, None))
        length = length - np.where(s2 > 0, _overlap(a, b, hole.center[ay] - s,
                                                     hole.center[ay] + s), 0.0)
    return np.clip(length, 0.0, None)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def _cell_areas(spec, xa, ya, h):
    """Fluid area of the cells ``[xa, xa+h] x [ya, ya+h]`` (composite Gauss)."""
    panels = 4
    area = np.zeros_like(xa)
    for p in range(panels):
        for xg, wg in zip(_GL_X, _GL_W):
            t = (p + 0.5 + 0.5 * xg) / panels
            area += 0.5 * wg / panels * h * _fluid_length(spec, xa + t * h, ya, ya + h, True)
    return area


def ray_hits(spec: DomainSpec, p, e, smax=1.0):
    """First crossing of the segments ``p + s e``, ``0 < s <= smax``.

    Parameters
    ----------
    p, e : ndarray, shape (m, 2)
        Start points (inside the fluid) and segment vectors.

    Returns
    -------
    s : ndarray
        Crossing parameter, ``inf`` where the segment stays in the fluid.
    comp : ndarray of int
        Component id of the crossed curve, ``-1`` where none.
    """
    p = np.atleast_2d(np.asarray(p, float))
    e = np.atleast_2d(np.asarray(e, float))
    m = len(p)
    best = np.full(m, np.inf)
    comp = np.full(m, -1, dtype=int)
    a = np.einsum("ij,ij->i", e, e)
    moving = a > 0  # zero-length segments cross nothing
    a = np.where(moving, a, 1.0)
    tiny = 1e-14

    def consider(s, cid):
        ok = moving & (s > tiny) & (s <= smax * (1 + 1e-12)) & (s < best)
        best[ok] = s[ok]
        comp[ok] = cid

    o = spec.outer
    if isinstance(o, Disk):
        d = p - np.asarray(o.center)
        b = np.einsum("ij,ij->i", e, d)
        c0 = np.einsum("ij,ij->i", d, d) - o.radius ** 2
        disc = np.sqrt(np.clip(b * b - a * c0, 0, None))
        consider((-b + disc) / a, 0)
    else:
        for k, (lo, hi) in enumerate([(o.xmin, o.xmax), (o.ymin, o.ymax)]):
            with np.errstate(divide="ignore", invalid="ignore"):
                s_lo = np.where(e[:, k] < 0, (lo - p[:, k]) / e[:, k], np.inf)
                s_hi = np.where(e[:, k] > 0, (hi - p[:, k]) / e[:, k], np.inf)
            consider(s_lo, 0)
            consider(s_hi, 0)
    for j, hole in enumerate(spec.holes):
        d = p - np.asarray(hole.center)
        b = np.einsum("ij,ij->i", e, d)
        c0 = np.einsum("ij,ij->i", d, d) - hole.radius ** 2
        disc2 = b * b - a * c0
        hit = disc2 > 0
        s = np.where(hit, (-b - np.sqrt(np.clip(disc2, 0, None))) / a, np.inf)
        consider(s, j + 1)
    return best, comp


# ---------------------------------------------------------------------------
# domain
# ---------------------------------------------------------------------------


@dataclass
class Faces:
    """Interior faces between distinct merged fluid cells.

    ``a`` and ``b`` are fluid indices; the face normal points from ``a`` to
    ``b`` (``+x`` for ``orient == 0``, ``+y`` for ``orient == 1``).  The
    stream-function flux through the face is ``psi[n1] - psi[n0]`` where
    ``n0``/``n1`` are flat node indices chosen so that this sign rule holds.
    """

    a: np.ndarray
    b: np.ndarray
    aperture: np.ndarray
    orient: np.ndarray
    n0: np.ndarray
    n1: np.ndarray
    regular: np.ndarray  # full face between two unmerged full cells
    far_a: np.ndarray  # fluid index upstream of a along the face normal, or -1
    far_b: np.ndarray  # fluid index downstream of b, or -1

    @property
    def n(self) -> int:
        return len(self.a)


class Domain:
    """Discretised fluid region.  Immutable after construction.

    Use :func:`build_domain` to create instances.
    """

    def __init__(self, spec: DomainSpec):
        self.spec = spec
        self._cache = {}

    # convenience -----------------------------------------------------------
    @property
    def holes(self) -> list[BoundaryComponent]:
        return self.components[1:]

    @property
    def n_holes(self) -> int:
        return len(self.components) - 1

    def components_of(self, kind: Kind) -> list[BoundaryComponent]:
        return [c for c in self.components if c.kind == Kind(kind)]

    @property
    def sources(self) -> list[BoundaryComponent]:
        return self.components_of(Kind.SOURCE)

    @property
    def sinks(self) -> list[BoundaryComponent]:
        return self.components_of(Kind.SINK)

    @property
    def area(self) -> float:
        """Exact area of the fluid region."""
        o = self.spec.outer
        a = math.pi * o.radius ** 2 if isinstance(o, Disk) else (o.xmax - o.xmin) * (o.ymax - o.ymin)
        return a - sum(math.pi * hh.radius ** 2 for hh in self.spec.holes)

    def signed_distance(self, pts):
        """Distance to the nearest boundary (positive in the fluid) and its id."""
        pts = np.asarray(pts, float)
        d = _signed_distances(self.spec, pts[..., 0], pts[..., 1])
        k = np.argmin(d, axis=0)
        return np.take_along_axis(d, k[None], 0)[0], k

    def scalar(self, values=0.0) -> ScalarField:
        return ScalarField(self, np.broadcast_to(np.asarray(values, float), (self.n_fluid,)).copy())

    def evaluate(self, fn) -> ScalarField:
        """Sample ``fn(x, y)`` at fluid cell centres."""
        c = self.centers
        return ScalarField(self, np.broadcast_to(fn(c[:, 0], c[:, 1]), (self.n_fluid,)).copy())

    def locate(self, pts) -> np.ndarray:
        """Fluid index of the grid cell containing each point (``-1`` if none)."""
        pts = np.atleast_2d(np.asarray(pts, float))
        ij = np.floor((pts - self.origin) / self.h).astype(int)
        ok = (ij[:, 0] >= 0) & (ij[:, 0] < self.nx) & (ij[:, 1] >= 0) & (ij[:, 1] < self.ny)
        out = np.full(len(pts), -1)
        out[ok] = self.fluid_index[ij[ok, 0], ij[ok, 1]]
        return out

    def fluid_cell_of(self, y) -> int:
        """Fluid cell whose centre cell contains ``y``; raises if ``y`` is not fluid."""
        y = np.asarray(y, float)
        d, _ = self.signed_distance(y)
        idx = self.locate(y)[0]
        if d <= 0 or idx < 0:
            raise PointOutsideFluid(f"point {tuple(y)} is not inside a fluid cell")
        return int(idx)

    @property
    def boundary_points(self) -> np.ndarray:
        return np.concatenate([c.points for c in self.components])

    def total_flux(self, traces: Sequence[BoundaryTrace]) -> float:
        return float(sum(boundary_integral(t, self) for t in traces))


def _validate(spec: DomainSpec, h: float, require_source_sink: bool):
    o = spec.outer
    holes = spec.holes
    if spec.grid_n < 8:
        raise GeometryError("grid_n must be at least 8")
    gap_min = 4.0 * h
    for k, hole in enumerate(holes):
        if hole.radius <= 0:
            raise GeometryError(f"hole {k}: radius must be positive")
        if isinstance(o, Disk):
            gap = o.radius - math.dist(o.center, hole.center) - hole.radius
        else:
            cx, cy = hole.center
            gap = min(cx - o.xmin, o.xmax - cx, cy - o.ymin, o.ymax - cy) - hole.radius
        if gap <= 0:
            raise GeometryError(f"hole {k} touches or crosses the outer boundary")
        if gap < gap_min:
            raise GeometryError(f"hole {k}: gap to outer boundary {gap:.3g} < 4h = {gap_min:.3g}")
        if hole.radius < 2 * h:
            raise GeometryError(f"hole {k}: radius below two grid spacings")
    for i in range(len(holes)):
        for j in range(i + 1, len(holes)):
            gap = math.dist(holes[i].center, holes[j].center) - holes[i].radius - holes[j].radius
            if gap <= 0:
                raise GeometryError(f"holes {i} and {j} overlap or touch")
            if gap < gap_min:
                raise GeometryError(f"holes {i} and {j}: gap {gap:.3g} < 4h = {gap_min:.3g}")
    if require_source_sink:
        kinds = {hh.kind for hh in holes}
        if Kind.SOURCE not in kinds or Kind.SINK not in kinds:
            raise GeometryError("need at least one source and at least one sink")


def build_domain(spec: DomainSpec, *, require_source_sink: bool = True) -> Domain:
    """Discretise ``spec``.

    Parameters
    ----------
    spec : DomainSpec
    require_source_sink : bool
        Enforce at least one source and one sink.  Test geometries such as a
        plain annulus switch this off.

    Raises
    ------
    GeometryError
        Overlapping holes, holes touching the outer curve, or a grid too
        coarse for the four-cell gap rule.
    """
    o = spec.outer
    if isinstance(o, Disk):
        xmin, xmax = o.center[0] - o.radius, o.center[0] + o.radius
        ymin, ymax = o.center[1] - o.radius, o.center[1] + o.radius
    else:
        xmin, xmax, ymin, ymax = o.xmin, o.xmax, o.ymin, o.ymax
    h = max(xmax - xmin, ymax - ymin) / spec.grid_n
    _validate(spec, h, require_source_sink)

    dom = Domain(spec)
    pad = 2
    dom.h = h
    dom.nx = int(math.ceil((xmax - xmin) / h - 1e-9)) + 2 * pad
    dom.ny = int(math.ceil((ymax - ymin) / h - 1e-9)) + 2 * pad
    dom.origin = np.array([xmin - pad * h, ymin - pad * h])
    nx, ny = dom.nx, dom.ny

    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    xc = dom.origin[0] + (ix + 0.5) * h
    yc = dom.origin[1] + (iy + 0.5) * h
    sd = _signed_distances(spec, xc, yc).min(axis=0)
    fluid = sd > 0

    lab, nlab = ndimage.label(fluid)
    if nlab != 1:
        raise GeometryError(f"fluid cells form {nlab} connected components")

    # --- exact cut-cell geometry -------------------------------------------
    xn = dom.origin[0] + np.arange(nx + 1) * h  # node coordinates
    yn = dom.origin[1] + np.arange(ny + 1) * h
    # vertical faces: apv[i, j] = fluid length of x = xn[i], y in [yn[j], yn[j+1]]
    XV, YV = np.meshgrid(xn, yn[:-1], indexing="ij")
    apv = _fluid_length(spec, XV, YV, YV + h, True)
    XH, YH = np.meshgrid(xn[:-1], yn, indexing="ij")
    aph = _fluid_length(spec, YH, XH, XH + h, False)

    area = np.where(fluid, h * h, 0.0)
    cut = np.abs(sd) < 0.75 * h
    area[cut] = _cell_areas(spec, xc[cut] - 0.5 * h, yc[cut] - 0.5 * h, h)
    area[area < 1e-14 * h * h] = 0.0

    # --- fluid indexing and sliver merging -----------------------------------
    fidx = np.full((nx, ny), -1, dtype=int)
    cells = np.argwhere(fluid)  # row-major order: deterministic
    fidx[cells[:, 0], cells[:, 1]] = np.arange(len(cells))
    host = fidx.copy()
    slivers = np.argwhere((~fluid) & (area > 0))
    pending = [tuple(s) for s in slivers]
    for _ in range(4):
        left = []
        for (i, j) in pending:
            # shared apertures with the four neighbours
            cand = []
            for di, dj, ap in ((1, 0, apv[i + 1, j]), (-1, 0, apv[i, j]),
                               (0, 1, aph[i, j + 1]), (0, -1, aph[i, j])):
                a, b = i + di, j + dj
                if 0 <= a < nx and 0 <= b < ny and host[a, b] >= 0 and ap > 0:
                    cand.append((ap, -abs(di) - abs(dj), host[a, b]))
            if cand:
                host[i, j] = max(cand)[2]
                continue
            best = None
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if (di or dj) and 0 <= a < nx and 0 <= b < ny and fidx[a, b] >= 0:
                        dd = di * di + dj * dj
                        if best is None or dd < best[0]:
                            best = (dd, fidx[a, b])
            if best is not None:
                host[i, j] = best[1]
            else:
                left.append((i, j))
        pending = left
        if not pending:
            break
    if pending:
        raise GeometryError(f"{len(pending)} cut cells could not be merged into a fluid cell")

    n = len(cells)
    vol = np.zeros(n)
    hs = host >= 0
    np.add.at(vol, host[hs], area[hs])

    dom.fluid_index = fidx
    dom.host = host
    dom.cells = cells
    dom.n_fluid = n
    dom.centers = np.stack([dom.origin[0] + (cells[:, 0] + 0.5) * h,
                            dom.origin[1] + (cells[:, 1] + 0.5) * h], axis=1)
    dom.volumes = vol
    dom.cell_area = area
    dom.ap_v = apv
    dom.ap_h = aph

    # --- faces between distinct merged cells ---------------------------------
    merged = np.zeros(n, dtype=bool)
    sl = (host >= 0) & (~fluid)
    merged[host[sl]] = True
    full = np.zeros(n, dtype=bool)
    full[:] = np.abs(area[cells[:, 0], cells[:, 1]] - h * h) < 1e-12 * h * h
    clean = full & ~merged  # unmerged full cells

    def neighbour(i, j):
        ok = (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
        out = np.full(np.shape(i), -1)
        out[ok] = fidx[i[ok], j[ok]]
        return out

    face_parts = []
    for orient in (0, 1):
        if orient == 0:
            I, J = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="ij")
            ap = apv[1:nx, :]
            I2, J2 = I + 1, J
            n0 = (I + 1) * (ny + 1) + J + 1  # flux = psi(x, y_lo) - psi(x, y_hi)
            n1 = (I + 1) * (ny + 1) + J
        else:
            I, J = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="ij")
            ap = aph[:, 1:ny]
            I2, J2 = I, J + 1
            n0 = I * (ny + 1) + J + 1  # flux = psi(x_hi, y) - psi(x_lo, y)
            n1 = (I + 1) * (ny + 1) + J + 1
        ha = host[I, J]
        hb = host[I2, J2]
        keep = (ap > 0) & (ha >= 0) & (hb >= 0) & (ha != hb)
        fa, fb = ha[keep], hb[keep]
        reg = (fidx[I, J][keep] == fa) & (fidx[I2, J2][keep] == fb)
        reg &= clean[fa] & clean[fb] & (np.abs(ap[keep] - h) < 1e-12 * h)
        di, dj = (1, 0) if orient == 0 else (0, 1)
        far_a = neighbour(I[keep] - di, J[keep] - dj)
        far_b = neighbour(I2[keep] + di, J2[keep] + dj)
        face_parts.append((fa, fb, ap[keep], np.full(keep.sum(), orient), n0[keep], n1[keep],
                           reg, far_a, far_b))
    cat = [np.concatenate([fp[k] for fp in face_parts]) for k in range(9)]
    dom.faces = Faces(*cat)

    # --- cell classification --------------------------------------------------
    cls = np.where(fluid, int(CellClass.FLUID), int(CellClass.SOLID)).astype(np.int8)
    near = np.zeros(n, dtype=bool)
    near |= ~clean
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        near |= neighbour(cells[:, 0] + di, cells[:, 1] + dj) < 0
    apmin = np.minimum.reduce([apv[cells[:, 0], cells[:, 1]], apv[cells[:, 0] + 1, cells[:, 1]],
                               aph[cells[:, 0], cells[:, 1]], aph[cells[:, 0], cells[:, 1] + 1]])
    near |= apmin < h * (1 - 1e-12)
    cls[cells[near, 0], cells[near, 1]] = int(CellClass.NEAR_BOUNDARY)
    dom.cell_class = cls
    dom.near = near

    # fluid-index neighbours in the four axis directions (-1 if not a fluid cell)
    dom.nbr = np.stack([neighbour(cells[:, 0] + 1, cells[:, 1]), neighbour(cells[:, 0] - 1, cells[:, 1]),
                        neighbour(cells[:, 0], cells[:, 1] + 1), neighbour(cells[:, 0], cells[:, 1] - 1)],
                       axis=1)

    # --- boundary components and quadrature ---------------------------------
    comps = []
    if isinstance(o, Disk):
        comps.append(_circle_component(0, Kind.OUTER, o, h, outward_radial=True))
    else:
        comps.append(_rect_component(o, h))
    for k, hole in enumerate(spec.holes):
        comps.append(_circle_component(k + 1, hole.kind, Disk(tuple(hole.center), hole.radius), h,
                                       outward_radial=False))
    for c in comps:
        ij = np.floor((c.points - dom.origin) / h).astype(int)
        hc = host[ij[:, 0], ij[:, 1]]
        for q in np.flatnonzero(hc < 0):
            # point on a cell edge: take the nearest hosted neighbour
            best = None
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = ij[q, 0] + di, ij[q, 1] + dj
                    if host[a, b] >= 0:
                        ctr = dom.origin + (np.array([a, b]) + 0.5) * h
                        dd = np.sum((ctr - c.points[q]) ** 2)
                        if best is None or dd < best[0]:
                            best = (dd, host[a, b])
            hc[q] = best[1]
        c.cells = hc
    dom.components = comps
    dom.comp_of_fluid_cell = None
    return dom


# ---------------------------------------------------------------------------
# boundary operations
# ---------------------------------------------------------------------------


def boundary_integral(trace: BoundaryTrace, domain: Domain | None = None, component=None) -> float:
    """Quadrature ``sum(value * weight)`` over the trace's component.

    The component is taken from ``component``, from ``domain`` or from the
    trace itself when it was created by a BoundaryComponent.
    """
    if component is not None:
        comp = component
    elif domain is not None:
        comp = domain.components[trace.component]
    elif trace.owner is not None:
        comp = trace.owner
    else:
        raise ValueError("boundary_integral needs the component (pass domain= or component=)")
    if trace.values.shape != comp.weights.shape:
        raise ValueError("trace length does not match the component quadrature")
    return float(np.dot(trace.values, comp.weights))


def _ls_design(dx, dy):
    return np.stack([np.ones_like(dx), dx, dy, dx * dx, dx * dy, dy * dy], axis=1)


def ls_stencil(domain: Domain, p, min_cells: int = 10, radius: float = 2.5):
    """Fluid cells used to fit a local quadratic around ``p``.

    Returns fluid indices sorted by distance.  Raises ExtrapolationError when
    fewer than six fluid cells are available within ``4.5 h``.
    """
    h = domain.h
    i, j = np.floor((np.asarray(p) - domain.origin) / h).astype(int)
    r = 5
    i0, i1 = max(i - r, 0), min(i + r + 1, domain.nx)
    j0, j1 = max(j - r, 0), min(j + r + 1, domain.ny)
    idx = domain.fluid_index[i0:i1, j0:j1].ravel()
    idx = idx[idx >= 0]
    d = np.hypot(*(domain.centers[idx] - p).T) / h
    order = np.argsort(d, kind="stable")
    idx, d = idx[order], d[order]
    rad = radius
    while True:
        sel = d <= rad
        if sel.sum() >= min_cells or rad >= 4.5:
            break
        rad += 0.5
    if sel.sum() < 6:
        raise ExtrapolationError(f"only {int(sel.sum())} fluid cells near {tuple(np.round(p, 6))}")
    return idx[sel], d[sel]


def ls_weights(domain: Domain, p, derivative: int = 0, extra=None):
    """Row of a weighted least-squares quadratic fit evaluated at ``p``.

    Parameters
    ----------
    derivative : int
        0 for the value, 1 for d/dx, 2 for d/dy.
    extra : ndarray, shape (m, 2), optional
        Additional data locations (boundary points with known values); their
        weights are returned as a second array.

    Returns
    -------
    idx, w[, w_extra]
        Fluid indices and weights such that ``value ~ w @ f[idx] (+ w_extra @ data)``.
    """
    h = domain.h
    idx, d = ls_stencil(domain, p)
    pts = domain.centers[idx]
    if extra is not None and len(extra):
        pts = np.concatenate([pts, extra])
        d = np.concatenate([d, np.hypot(*(extra - p).T) / h])
    A = _ls_design((pts[:, 0] - p[0]) / h, (pts[:, 1] - p[1]) / h)
    wt = 1.0 / (1.0 + d * d)
    sw = np.sqrt(wt)
    coef = np.linalg.pinv(A * sw[:, None]) * sw[None, :]
    row = coef[derivative] / (h if derivative else 1.0)
    if extra is not None and len(extra):
        return idx, row[: len(idx)], row[len(idx):]
    return idx, row


def _trace_operator(domain: Domain, comp: BoundaryComponent):
    key = ("trace", comp.id)
    if key not in domain._cache:
        rows, cols, vals = [], [], []
        for q, p in enumerate(comp.points):
            idx, w = ls_weights(domain, p)
            rows.append(np.full(len(idx), q))
            cols.append(idx)
            vals.append(w)
        rows, cols, vals = map(np.concatenate, (rows, cols, vals))
        M = sparse.csr_matrix((vals, (rows, cols)), shape=(comp.n_q, domain.n_fluid))
        # stencil pattern for the optional range limiter (same ordering as rows)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=comp.n_q))])
        domain._cache[key] = (M, cols, indptr)
    return domain._cache[key]


def sample_to_boundary(f: ScalarField, component, *, limit: bool = False,
                       time: float = 0.0) -> BoundaryTrace:
    """Extrapolate a cell field to the quadrature points of ``component``.

    A weighted least-squares quadratic over the nearby fluid cells is
    evaluated at each quadrature point, which reproduces quadratics exactly.
    With ``limit=True`` every value is clipped to the range of its stencil,
    so the trace never leaves the range of the field.

    Raises
    ------
    ExtrapolationError
        Fewer than six fluid cells around a quadrature point.
    """
    dom = f.domain
    comp = dom.components[component] if isinstance(component, (int, np.integer)) else component
    M, cols, indptr = _trace_operator(dom, comp)
    vals = M @ f.values
    if limit:
        sv = f.values[cols]
        lo = np.minimum.reduceat(sv, indptr[:-1])
        hi = np.maximum.reduceat(sv, indptr[:-1])
        vals = np.clip(vals, lo, hi)
    return BoundaryTrace(comp.id, vals, time, owner=comp)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_csv(f: ScalarField, path) -> None:
    """Write ``x, y, value`` per fluid cell."""
    data = np.column_stack([f.domain.centers, f.values])
    np.savetxt(path, data, delimiter=",", header="x,y,value", comments="", fmt="%.17g")


def export_f64(f: ScalarField, path) -> None:
    """Write a raw little-endian float64 grid (NaN off the fluid).

    The file starts with one text line ``nx ny h x0 y0`` followed by the
    ``nx * ny`` values in row-major ``[ix, iy]`` order.
    """
    d = f.domain
    header = f"{d.nx} {d.ny} {float(d.h):.17g} {float(d.origin[0]):.17g} {float(d.origin[1]):.17g}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.grid().astype("<f8").tobytes())


def read_f64(path):
    """Inverse of :func:`export_f64`; returns ``(grid, h, origin)``."""
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        nx, ny = int(header[0]), int(header[1])
        h, x0, y0 = map(float, header[2:5])
        grid = np.frombuffer(fh.read(), dtype="<f8").reshape(nx, ny)
    return grid, h, np.array([x0, y0])
