import math

import numpy as np
import pytest

from sinkflow import elliptic as ell
from sinkflow.circulation import (
    CirculationState,
    advance_circulations,
    circulation_rhs,
    initial_circulations,
    measure_circulation,
    total_vorticity_check,
    total_vorticity_residual,
)
from sinkflow.domain import BoundaryTrace, VectorField, build_domain
from sinkflow.scenario import reference_scenario


def test_initial_circulations_close_total_vorticity(dom64):
    w = dom64.evaluate(lambda x, y: np.exp(-x * x - y * y))
    st = initial_circulations(w, [0.3, -0.2])
    assert st.C_outer == pytest.approx(w.integral() - 0.1, abs=1e-15)
    assert abs(total_vorticity_residual(w, st)) < 1e-14
    assert st.total == pytest.approx(w.integral(), abs=1e-14)


def test_state_rejects_nonfinite():
    with pytest.raises(ValueError):
        CirculationState(np.array([np.nan, 0.0]), 0.0)


def test_rhs_constant_traces(dom64):
    c = dom64.components[1]
    g = c.trace(np.full(c.n_q, -2.0 / c.perimeter))
    w = c.trace(np.full(c.n_q, 0.5))
    # -oint omega g = -0.5 * (-2)
    assert circulation_rhs(g, w, c) == pytest.approx(1.0, rel=1e-12)


def test_rhs_shape_mismatch(dom64):
    c = dom64.components[1]
    with pytest.raises(ValueError):
        circulation_rhs(c.trace(np.ones(c.n_q)), BoundaryTrace(1, np.ones(3)), c)


def test_advance_is_trapezoidal(dom64):
    src, snk = dom64.components[1], dom64.components[2]
    g0 = [src.trace(np.full(src.n_q, -1.0 / src.perimeter)), snk.trace(np.full(snk.n_q, 1.0 / snk.perimeter))]
    g1 = [src.trace(np.full(src.n_q, -3.0 / src.perimeter)), snk.trace(np.full(snk.n_q, 3.0 / snk.perimeter))]
    plus = [src.trace(np.full(src.n_q, 2.0))]
    minus = [snk.trace(np.full(snk.n_q, -1.0))]
    st = CirculationState(np.array([0.1, 0.2]), 0.5)
    new = advance_circulations(st, dom64, 0.1, (g0, g1), (plus, plus), (minus, minus))
    # source rate: 2 then 6; sink rate: 1 then 3
    assert new.C == pytest.approx([0.1 + 0.05 * 8, 0.2 + 0.05 * 4], rel=1e-12)
    assert new.C_outer == 0.5 and new.t == pytest.approx(0.1)


@pytest.mark.parametrize("grid_n", [32, 64, 128])
def test_measure_circulation_of_point_vortex_field(grid_n):
    # v = perp grad log|x - c| / (2 pi) around the source centre has unit
    # circulation around the source and none around the sink.
    d = build_domain(reference_scenario(grid_n).spec)
    c = np.array([-1.5, 0.0])
    x, y = d.centers.T
    r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2
    v = VectorField(d, -(y - c[1]) / (2 * math.pi * r2), (x - c[0]) / (2 * math.pi * r2))
    src, snk = d.components[1], d.components[2]
    err = abs(abs(measure_circulation(v, src)) - 1.0)
    assert err < {32: 0.12, 64: 0.025, 128: 0.006}[grid_n]
    assert abs(measure_circulation(v, snk)) < 0.01


def test_harmonic_velocity_circulation_reproduced(dom64, basis64):
    X = ell.harmonic_fields(dom64, basis64)
    v = X[0] * 0.7 + X[1] * -0.4
    got = [measure_circulation(v, c) for c in dom64.holes]
    assert got == pytest.approx([0.7, -0.4], abs=0.02)


def test_record_total_vorticity(rec64):
    assert abs(total_vorticity_check(rec64, 0.0)) < 1e-13
    # away from t = 0 the identity holds up to the discretisation error O(h + dt)
    res = [abs(total_vorticity_check(rec64, t)) for t in rec64.times]
    assert max(res) < 0.02 * max(1.0, np.abs(rec64.omega[0]).max())
