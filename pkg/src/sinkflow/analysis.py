"""A priori budgets, convex gauges and the vanishing-viscosity sweep.

For a convex even gauge ``G >= 0`` every run should satisfy

    int G(omega(t)) + int_0^t oint_sinks g G(omega_minus)
        <= int G(omega_in) + int_0^t oint_sources (-g) G(omega_plus),

with ``G(s) = |s|^q`` giving the ``L^q`` budget.  The de la Vallee Poussin
construction turns the tail decay of a uniformly integrable family into an
explicit superlinear convex gauge with a certified bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import Kind
from .errors import HypothesisViolated, NonConvexGauge, NotUniformlyIntegrable, ValidationError

# ---------------------------------------------------------------------------
# budgets
# ---------------------------------------------------------------------------


@dataclass
class BudgetReport:
    """Terms of a gauge budget at every recorded time.

    ``slack = initial + inflow - interior - outflow``; ``inflow`` and
    ``outflow`` are accumulated from 0 to each time.
    """

    gauge: str
    times: np.ndarray
    interior: np.ndarray
    outflow: np.ndarray
    initial: float
    inflow: np.ndarray
    dissipation: np.ndarray | None = None

    @property
    def lhs(self) -> np.ndarray:
        return self.interior + self.outflow

    @property
    def rhs(self) -> np.ndarray:
        return self.initial + self.inflow

    @property
    def slack(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def relative_slack(self) -> np.ndarray:
        scale = np.maximum(self.rhs, 1e-300)
        return np.where(self.rhs > 0, self.slack / scale, 0.0)

    def passes(self, tol: float = 0.05) -> bool:
        return bool(np.all(self.slack >= -tol * np.maximum(self.rhs, 0.0)))

    def to_csv(self, path) -> None:
        data = np.column_stack([self.times, self.interior, self.outflow, np.full_like(self.times, self.initial),
                                self.inflow, self.slack])
        np.savetxt(path, data, delimiter=",", header="t,interior,outflow,initial,inflow,slack",
                   comments="", fmt="%.17g")


def _cumulative(times, rate):
    """Trapezoidal running integral of ``rate`` sampled at ``times``."""
    out = np.zeros(len(times))
    out[1:] = np.cumsum(0.5 * np.diff(times) * (rate[1:] + rate[:-1]))
    return out


def _boundary_rates(record, G):
    d = record.domain
    rin = np.zeros(len(record.times))
    rout = np.zeros(len(record.times))
    for c in d.holes:
        g = record.g[c.id]
        if c.kind == Kind.SOURCE:
            rin += (-g * G(np.abs(record.omega_plus[c.id]))) @ c.weights
        else:
            rout += (g * G(np.abs(record.omega_minus[c.id]))) @ c.weights
    return rin, rout


def _budget(record, G, name, dG=None):
    vol = record.domain.volumes
    interior = G(np.abs(record.omega)) @ vol
    rin, rout = _boundary_rates(record, G)
    diss = None
    if dG is not None and record.nu > 0:
        from .transport import _fv_ops

        ops = _fv_ops(record.domain)
        f = record.domain.faces
        wa, wb = record.omega[:, f.a], record.omega[:, f.b]
        diss = record.nu * ((dG(wb) - dG(wa)) * (wb - wa)) @ ops.cond
    return BudgetReport(name, record.times.copy(), interior, _cumulative(record.times, rout),
                        float(interior[0]), _cumulative(record.times, rin), diss)


def lp_budget(record, q: float) -> BudgetReport:
    """``L^q`` budget, ``1 <= q < inf``."""
    if not 1 <= q < math.inf:
        raise ValidationError("q must satisfy 1 <= q < inf")
    return _budget(record, lambda s: np.abs(s) ** q, f"L{q:g}",
                   dG=lambda s: q * np.sign(s) * np.abs(s) ** (q - 1))


def linf_bound(record) -> float:
    """``max_t max(|omega(t)|_inf, |omega_minus|_inf) / max(|omega_in|_inf, |omega_plus|_inf)``.

    Returns 0 when all data vanish.
    """
    den = float(np.max(np.abs(record.omega[0])))
    for v in record.omega_plus.values():
        den = max(den, float(np.max(np.abs(v))))
    num = float(np.max(np.abs(record.omega)))
    for v in record.omega_minus.values():
        num = max(num, float(np.max(np.abs(v))))
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return num / den


def default_gauge(s):
    """``G(x) = x^2 / sqrt(x^2 + 1)``."""
    s = np.asarray(s, float)
    return s * s / np.sqrt(s * s + 1)


def _default_gauge_derivative(s):
    s = np.asarray(s, float)
    return s * (s * s + 2) / (s * s + 1) ** 1.5


def check_convex_gauge(G, smax: float = 1e3, n: int = 2001) -> None:
    """Probe evenness, convexity and nonnegativity of ``G`` on ``[-smax, smax]``.

    Raises
    ------
    NonConvexGauge
    """
    s = np.concatenate([-np.geomspace(smax, 1e-6, n // 2), [0.0], np.geomspace(1e-6, smax, n // 2)])
    v = np.asarray(G(s), float)
    scale = max(1.0, float(np.max(np.abs(v))))
    if np.any(v < -1e-12 * scale):
        raise NonConvexGauge("gauge takes negative values")
    if np.max(np.abs(v - np.asarray(G(-s), float))) > 1e-10 * scale:
        raise NonConvexGauge("gauge is not even")
    slopes = np.diff(v) / np.diff(s)
    if np.any(np.diff(slopes) < -1e-8 * max(1.0, float(np.max(np.abs(slopes))))):
        raise NonConvexGauge("gauge is not convex")


def g_budget(record, G=None) -> BudgetReport:
    """Budget for a convex even gauge (default ``x^2/sqrt(x^2+1)``).

    Also records the discrete dissipation ``nu sum_f (G'(w_b) - G'(w_a))(w_b - w_a) A_f/d_f``,
    the face form of ``nu int G''(omega) |grad omega|^2``.
    """
    if G is None:
        G, dG, name = default_gauge, _default_gauge_derivative, "x2/sqrt(x2+1)"
    else:
        check_convex_gauge(G)
        dG = getattr(G, "derivative", None)
        if dG is None:
            def dG(s, G=G):
                e = 1e-6 * np.maximum(1.0, np.abs(s))
                return (G(s + e) - G(s - e)) / (2 * e)
        name = getattr(G, "name", "gauge")
    return _budget(record, G, name, dG)


# ---------------------------------------------------------------------------
# de la Vallee Poussin
# ---------------------------------------------------------------------------


@dataclass
class ConvexGauge:
    """Piecewise-linear even gauge with ``G(N_i) = i N_i``.

    On ``[N_i, N_{i+1})`` the gauge interpolates linearly between
    ``(N_i, i N_i)`` and ``(N_{i+1}, (i+1) N_{i+1})``; past the last
    breakpoint it continues with the slope it would have for
    ``N_{K+1} = 2 N_K``.  With ``N_{i+1} >= 2 N_i`` the slopes lie in
    ``(i + 1, i + 2]`` and increase, so the gauge is convex and superlinear.
    """

    N: np.ndarray
    certified_bound: float = math.nan
    name: str = "dlvp"
    levels: list = field(default_factory=list)

    def __post_init__(self):
        self.N = np.asarray(self.N, float)
        if self.N[0] != 0 or np.any(np.diff(self.N) <= 0):
            raise ValidationError("breakpoints must start at 0 and increase")

    @property
    def slopes(self) -> np.ndarray:
        N = self.N
        i = np.arange(len(N) - 1)
        s = ((i + 1) * N[1:] - i * N[:-1]) / np.diff(N)
        K = len(N) - 1
        return np.append(s, K + 2.0)

    @property
    def values(self) -> np.ndarray:
        return np.arange(len(self.N)) * self.N

    def __call__(self, s):
        a = np.abs(np.asarray(s, float))
        k = np.clip(np.searchsorted(self.N, a, side="right") - 1, 0, len(self.N) - 1)
        return self.values[k] + self.slopes[k] * (a - self.N[k])

    def derivative(self, s):
        s = np.asarray(s, float)
        a = np.abs(s)
        k = np.clip(np.searchsorted(self.N, a, side="right") - 1, 0, len(self.N) - 1)
        return np.sign(s) * self.slopes[k]

    def probe(self) -> None:
        """Check convexity, evenness and superlinearity at and between breakpoints."""
        sl = self.slopes
        if np.any(np.diff(sl) < -1e-12 * np.max(sl)):
            raise NonConvexGauge("slopes decrease")
        if np.any(sl[1:] < np.arange(1, len(sl)) + 1 - 1e-12):
            raise NonConvexGauge("slope of segment i is below i + 1")
        pts = np.concatenate([self.N, 0.5 * (self.N[1:] + self.N[:-1]), [2 * self.N[-1] + 1]])
        if np.max(np.abs(self(pts) - self(-pts))) > 0:
            raise NonConvexGauge("gauge is not even")
        check_convex_gauge(self, smax=4 * max(self.N[-1], 1.0))


def _family_arrays(family, measures):
    fs = [np.abs(np.asarray(f, float)).ravel() for f in family]
    if measures is None:
        raise ValidationError("cell measures are required")
    if isinstance(measures, (list, tuple)):
        ms = [np.asarray(m, float).ravel() for m in measures]
    else:
        m = np.asarray(measures, float).ravel()
        ms = [m] * len(fs)
    return fs, ms


def tail_sup(fs, ms, n: float) -> float:
    """``sup_j int_{|f_j| > n} |f_j|``."""
    return max(float(np.dot(np.where(f > n, f, 0.0), m)) for f, m in zip(fs, ms))


def _threshold(fs, ms, level: float, start: float, cap: float):
    """Smallest ``N >= start`` (to 1e-9 relative) with ``tail_sup(N) < level``.

    Doubling then bisection; ``None`` if the cap is reached first.
    """
    if tail_sup(fs, ms, start) < level:
        return start
    lo, hi = start, max(2 * start, 1e-12)
    while tail_sup(fs, ms, hi) >= level:
        lo, hi = hi, 2 * hi
        if hi > cap:
            return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if tail_sup(fs, ms, mid) < level:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-9 * hi:
            break
    return hi


def _breakpoints(fs, ms, max_levels: int, cap: float):
    N = [0.0]
    fmax = max(float(np.max(f)) for f in fs)
    for i in range(1, max_levels + 1):
        start = max(2 * N[-1], 1e-12 if i == 1 else 2 * N[-1])
        Ni = _threshold(fs, ms, 2.0 ** -i, start, cap)
        if Ni is None:
            return N, i
        N.append(Ni)
        if Ni > fmax:  # every tail is empty from here on
            break
    return N, None


def dlvp_gauge(family, measures, *, max_levels: int = 40, cap: float = 1e15, probe: bool = True) -> ConvexGauge:
    """Construct the de la Vallee Poussin gauge of a sampled function family.

    Parameters
    ----------
    family : sequence of arrays
        Samples of ``f_j`` on a common set of cells.
    measures : array or sequence of arrays
        Cell measures (shared, or one array per member).

    Breakpoints ``N_i`` are the smallest values with
    ``sup_j int_{|f_j| > N_i} |f_j| < 2^-i``, found by doubling and bisection
    and forced to satisfy ``N_{i+1} >= 2 N_i``.  The certified bound is
    ``N_1 |O| + sum_{i>=1} (i + 1) / 2^i = N_1 |O| + 3``.

    Uniform integrability of a finite family is probed through its prefixes:
    when the first breakpoint keeps pace with the largest value of the
    first quarter, half and all of the family while that value grows, the
    tail mass escapes to infinity with the family index.

    Raises
    ------
    NotUniformlyIntegrable
    """
    fs, ms = _family_arrays(family, measures)
    vol = float(np.max([m.sum() for m in ms]))
    N, failed = _breakpoints(fs, ms, max_levels, cap)
    if failed is not None:
        raise NotUniformlyIntegrable(f"tail mass stays above 2^-{failed} up to {cap:g}")
    J = len(fs)
    if J >= 4:
        ratios, maxima = [], []
        for Jp in (J // 4, J // 2, J):
            Np, _ = _breakpoints(fs[:Jp], ms[:Jp], 1, cap)
            M = max(float(np.max(f)) for f in fs[:Jp])
            ratios.append(Np[1] / M if len(Np) > 1 and M > 0 else 0.0)
            maxima.append(M)
        if min(ratios) >= 0.5 and maxima[-1] >= 2 * maxima[0]:
            raise NotUniformlyIntegrable(
                "the first breakpoint grows with the family maximum: tail mass escapes with j")
    cert = N[1] * vol + 3.0 if len(N) > 1 else 3.0
    G = ConvexGauge(np.array(N), cert, levels=[2.0 ** -i for i in range(1, len(N))])
    if probe:
        G.probe()
    return G


def example_ui_family(J: int = 20, n: int = 4096):
    """Members ``f_j = min(x^(-1/2), 4 j)`` on ``(0, 1)``, all dominated by ``x^(-1/2)``.

    Returns ``(family, measures)`` on ``n`` equal cells.
    """
    x = (np.arange(n) + 0.5) / n
    m = np.full(n, 1.0 / n)
    return [np.minimum(x ** -0.5, 4.0 * j) for j in range(1, J + 1)], m


def example_concentrating_family(J: int = 20, n: int = 4096):
    """Members ``f_j = j 1_(0, 1/j)`` on ``(0, 1)``: unit mass escaping to infinite height."""
    x = (np.arange(n) + 0.5) / n
    m = np.full(n, 1.0 / n)
    return [np.where(x < 1.0 / j, float(j), 0.0) for j in range(1, J + 1)], m


def gauge_sup_integral(G, family, measures) -> float:
    fs, ms = _family_arrays(family, measures)
    return max(float(np.dot(G(f), m)) for f, m in zip(fs, ms))


@dataclass
class WeightedUIReport:
    deltas: np.ndarray
    small_weight_measure: np.ndarray
    tail_levels: np.ndarray  # tail_sup of f_j h_j at the ladder n = 2^k
    tail_ladder: np.ndarray
    gauge_integral: float
    consistent: bool


def weighted_ui_check(f_list, h_list, G, measures) -> WeightedUIReport:
    """Check the weighted uniform-integrability equivalence on sampled data.

    (a) the tail functional of ``f_j h_j`` on a doubling ladder, (b)
    ``sup_j int G(f_j) h_j``.  The verdict is consistent when the tail decays
    to zero on the ladder and (b) is finite, or neither holds.

    Raises
    ------
    HypothesisViolated
        If ``sup_j mu{h_j <= delta}`` does not shrink along a ``delta`` ladder.
    """
    fs, ms = _family_arrays(f_list, measures)
    hs = [np.asarray(h, float).ravel() for h in h_list]
    if any(np.any(h <= 0) for h in hs):
        raise HypothesisViolated("weights must be positive")
    hmax = max(float(np.max(h)) for h in hs)
    deltas = hmax * np.geomspace(1e-1, 1e-6, 6)
    meas = np.array([max(float(m[h <= dlt].sum()) for h, m in zip(hs, ms)) for dlt in deltas])
    if meas[-1] > 0 and meas[-1] >= 0.5 * meas[0]:
        raise HypothesisViolated(f"measure of {{h <= delta}} stays near {meas[-1]:.3g}")
    fh = [f * h for f, h in zip(fs, hs)]
    top = max(float(np.max(x)) for x in fh)
    ladder = np.array([0.0] + list(np.geomspace(max(top, 1e-300) * 2.0 ** -20, 2 * max(top, 1e-300), 22)))
    tails = np.array([tail_sup(fh, ms, n) for n in ladder])
    gi = max(float(np.dot(G(f) * h, m)) for f, h, m in zip(fs, hs, ms))
    decays = tails[-1] == 0.0 or tails[-1] < 1e-12 * max(tails[0], 1e-300)
    return WeightedUIReport(deltas, meas, tails, ladder, gi, bool(decays == np.isfinite(gi)))


# ---------------------------------------------------------------------------
# vanishing viscosity
# ---------------------------------------------------------------------------


@dataclass
class SweepReport:
    """Pairwise distances between consecutive viscosities of a sweep."""

    nus: np.ndarray
    times: np.ndarray
    field_distance: np.ndarray  # (n_pairs, n_times) L^p distance of omega
    trace_distance: np.ndarray  # (n_pairs,) L^p(g ds dt) distance of the outflow traces
    circulation_distance: np.ndarray  # (n_pairs,) sup-in-time distance of the hole circulations
    records: list = field(repr=False, default_factory=list)
    reference_distance: float | None = None  # frozen-velocity variant: distance to the inviscid run

    @property
    def terminal_distance(self) -> np.ndarray:
        return self.field_distance[:, -1]

    @staticmethod
    def decreasing(d, inversions_at_start: int = 1) -> bool:
        """Strictly decreasing, except that the first pair may be out of order."""
        d = np.asarray(d)
        if len(d) < 2:
            return True
        steps = d[1:] < d[:-1]
        return bool(np.all(steps[inversions_at_start:]))

    @property
    def monotone(self) -> bool:
        return self.decreasing(self.terminal_distance) and self.decreasing(self.trace_distance)


class FrozenFlowModel:
    """Transport-only model: the velocity is the potential flow plus fixed circulations."""

    def __init__(self, model, C):
        self.__dict__.update(model.__dict__)
        self._base = model
        self._C = np.asarray(C, float)

    def flow(self, omega, C, t):
        return self._base.flow(np.zeros(self.domain.n_fluid), self._C, t)

    def g_traces(self, t):
        return self._base.g_traces(t)

    def omega_plus_traces(self, t):
        return self._base.omega_plus_traces(t)


def _lp(x, w, p):
    return float(np.dot(np.abs(x) ** p, w)) ** (1.0 / p)


def nu_sweep(scenario, nus, T: float | None = None, *, grid_n: int | None = None, p: float | None = None,
             frozen_velocity: bool = False, workers: int = 1) -> SweepReport:
    """Run the scenario for decreasing viscosities and compare consecutive runs.

    ``workers > 1`` runs the viscosities in a thread pool; results keep the
    order of ``nus``, so the report does not depend on the pool size.

    With ``frozen_velocity=True`` the velocity is the potential flow with the
    initial circulations, independent of the vorticity; the inviscid
    semi-Lagrangian run is then added as the limit reference.
    """
    from .transport import FlowModel, run_scenario

    nus = np.asarray(nus, float)
    if np.any(np.diff(nus) >= 0):
        raise ValidationError("viscosities must decrease")
    if grid_n is not None:
        scenario = scenario.with_grid(grid_n)
    T = scenario.T if T is None else T
    p = scenario.p if p is None else p
    model = FlowModel.from_scenario(scenario)
    if frozen_velocity:
        model = FrozenFlowModel(model, scenario.C_in)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(lambda nu: run_scenario(scenario, float(nu), T, model=model), nus))
    else:
        recs = [run_scenario(scenario, float(nu), T, model=model) for nu in nus]
    d = model.domain
    times = recs[0].times
    fd, td, cd = [], [], []
    for a, b in zip(recs[:-1], recs[1:]):
        if len(a.times) != len(b.times):
            raise ValidationError("runs of a sweep must share the time grid")
        fd.append([_lp(a.omega[k] - b.omega[k], d.volumes, p) for k in range(len(times))])
        tw = a.time_weights()
        tot = 0.0
        for c in d.sinks:
            diff = np.abs(a.omega_minus[c.id] - b.omega_minus[c.id]) ** p
            tot += float(tw @ ((a.g[c.id] * diff) @ c.weights))
        td.append(tot ** (1.0 / p))
        cd.append(float(np.max(np.abs(a.C - b.C))) if a.C.size else 0.0)
    ref = None
    if frozen_velocity:
        inv = run_scenario(scenario, 0.0, T, model=model)
        ref = _lp(inv.omega[-1] - recs[-1].omega[-1], d.volumes, p)
        recs.append(inv)
    return SweepReport(nus, times, np.array(fd), np.array(td), np.array(cd), recs, ref)
