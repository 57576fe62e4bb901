import math

import numpy as np
import pytest

from sinkflow import elliptic as ell
from sinkflow.circulation import measure_circulation
from sinkflow.domain import Disk, DomainSpec, Hole, ScalarField, build_domain, sample_to_boundary
from sinkflow.errors import CompatibilityError, PointOutsideFluid
from sinkflow.scenario import reference_scenario
from sinkflow.transport import extend_to_grid, interpolate_bilinear

C1 = np.array([-1.5, 0.1])
C2 = np.array([1.5, -0.1])


def log_potential(x, y):
    return np.log(np.hypot(x - C1[0], y - C1[1])) - np.log(np.hypot(x - C2[0], y - C2[1]))


def log_potential_grad(x, y):
    r1 = (x - C1[0]) ** 2 + (y - C1[1]) ** 2
    r2 = (x - C2[0]) ** 2 + (y - C2[1]) ** 2
    return (x - C1[0]) / r1 - (x - C2[0]) / r2, (y - C1[1]) / r1 - (y - C2[1]) / r2


def normal_traces(d, grad):
    out = []
    for c in d.components:
        gx, gy = grad(c.points[:, 0], c.points[:, 1])
        out.append(c.trace(gx * c.normals[:, 0] + gy * c.normals[:, 1]))
    return out


def bump(x, y):
    s = x ** 2 + (y - 1.5) ** 2
    return np.where(s < 1, (1 - s) ** 4, 0.0)


def bump_lap(x, y):
    s = x ** 2 + (y - 1.5) ** 2
    return np.where(s < 1, 48 * s * (1 - s) ** 2 - 16 * (1 - s) ** 3, 0.0)


def bump_grad(x, y):
    s = x ** 2 + (y - 1.5) ** 2
    f1 = np.where(s < 1, -4 * (1 - s) ** 3, 0.0)
    return 2 * x * f1, 2 * (y - 1.5) * f1


@pytest.fixture(scope="module")
def dom32():
    return build_domain(reference_scenario(32).spec)


# --- Dirichlet problems ------------------------------------------------------


def test_poisson_zero_data(dom64):
    u = ell.solve_poisson_dirichlet(dom64, np.zeros(dom64.n_fluid), 0.0)
    assert np.all(u.values == 0)


def test_poisson_manufactured_cubic(dom64):
    exact = dom64.evaluate(lambda x, y: x ** 2 * y).values
    u = ell.solve_poisson_dirichlet(dom64, dom64.evaluate(lambda x, y: 2 * y),
                                    {k: (lambda x, y: x ** 2 * y) for k in range(3)})
    assert np.max(np.abs(u.values - exact)) < 1e-8


def test_poisson_smooth_solution_second_order():
    errs = []
    for n in (32, 64):
        d = build_domain(reference_scenario(n).spec)
        u = ell.solve_poisson_dirichlet(d, d.evaluate(lambda x, y: -2 * np.sin(x) * np.sin(y)),
                                        {k: (lambda x, y: np.sin(x) * np.sin(y)) for k in range(3)})
        errs.append(np.max(np.abs(u.values - d.evaluate(lambda x, y: np.sin(x) * np.sin(y)).values)))
    assert errs[0] / errs[1] > 3


def test_poisson_maximum_principle(dom64):
    u = ell.solve_poisson_dirichlet(dom64, np.zeros(dom64.n_fluid), [0.0, 1.0, 0.0])
    assert u.values.min() >= -1e-12 and u.values.max() <= 1 + 1e-12


def test_dirichlet_gradient_of_linear_function(dom64):
    f = lambda x, y: 2 * x - y  # noqa: E731
    u = dom64.evaluate(f)
    gx, gy = ell.dirichlet_gradient(dom64, u.values, {k: f for k in range(3)})
    assert np.allclose(gx, 2, atol=1e-8) and np.allclose(gy, -1, atol=1e-8)


# --- Neumann problem and potential lift ---------------------------------------


def test_neumann_zero_data(dom64):
    phi = ell.solve_laplace_neumann(dom64, [c.trace(np.zeros(c.n_q)) for c in dom64.components])
    assert np.max(np.abs(phi.values)) < 1e-12


def test_neumann_incompatible_flux(dom64):
    c = dom64.components[1]
    with pytest.raises(CompatibilityError):
        ell.solve_laplace_neumann(dom64, [c.trace(np.full(c.n_q, 0.1 / c.perimeter))])


def test_neumann_manufactured_potential_converges():
    errs = []
    for n in (32, 64):
        d = build_domain(reference_scenario(n).spec)
        phi = ell.solve_laplace_neumann(d, normal_traces(d, log_potential_grad))
        e = phi.values - d.evaluate(log_potential).values
        e -= np.average(e, weights=d.volumes)
        errs.append(math.sqrt(np.dot(e * e, d.volumes)))
    assert errs[1] < 1e-3
    assert errs[0] / errs[1] > 2.5


def test_potential_lift_matches_gradient(dom64):
    v = ell.potential_lift(dom64, normal_traces(dom64, log_potential_grad))
    gx, gy = log_potential_grad(dom64.centers[:, 0], dom64.centers[:, 1])
    inner = dom64.signed_distance(dom64.centers)[0] > 0.3
    assert max(np.abs(v.x - gx)[inner].max(), np.abs(v.y - gy)[inner].max()) < 5e-3
    for c in dom64.holes:
        assert abs(measure_circulation(v, c)) < 5e-3


def test_potential_lift_zero(dom64):
    v = ell.potential_lift(dom64, [c.trace(np.zeros(c.n_q)) for c in dom64.components])
    assert np.max(np.abs(v.x)) < 1e-12 and np.max(np.abs(v.y)) < 1e-12


# --- harmonic basis ----------------------------------------------------------


def test_harmonic_basis_properties(dom64, basis64):
    M = basis64.period_matrix
    assert np.allclose(M, M.T, rtol=1e-8)
    assert np.all(np.linalg.eigvalsh(M) > 0)
    for p in basis64.psi:
        assert p.values.min() >= -1e-10 and p.values.max() <= 1 + 1e-10


def test_annulus_period_matrix():
    R, r0 = 2.0, 0.5
    d = build_domain(DomainSpec(Disk((0.0, 0.0), R), (Hole((0.0, 0.0), r0, "sink"),), 64),
                     require_source_sink=False)
    M = ell.harmonic_basis(d).period_matrix
    assert abs(M[0, 0] - 2 * math.pi / math.log(R / r0)) / (2 * math.pi / math.log(R / r0)) < 0.01


def test_harmonic_field_circulations(dom64, basis64):
    X = ell.harmonic_fields(dom64, basis64)
    M = np.array([[measure_circulation(Xi, dom64.components[j + 1]) for j in range(2)] for Xi in X])
    assert np.max(np.abs(M - np.eye(2))) < 0.02


def test_harmonic_fields_tangent_to_boundary(dom64, basis64):
    for Xi in ell.harmonic_fields(dom64, basis64):
        for c in dom64.components:
            vx = sample_to_boundary(ScalarField(dom64, Xi.x), c).values
            vy = sample_to_boundary(ScalarField(dom64, Xi.y), c).values
            vn = vx * c.normals[:, 0] + vy * c.normals[:, 1]
            vt = vx * c.tangents[:, 0] + vy * c.tangents[:, 1]
            assert np.max(np.abs(vn)) < 0.1 * max(np.max(np.abs(vt)), 1e-3) + 0.05


def test_harmonic_fields_divergence_free(dom64, basis64):
    for Xi in ell.harmonic_fields(dom64, basis64):
        inner = dom64.signed_distance(dom64.centers)[0] > 3 * dom64.h
        assert np.max(np.abs(ell.divergence(Xi)[inner])) < 1e-8


# --- Biot-Savart -------------------------------------------------------------


def test_biot_savart_zero(dom64, basis64):
    k = ell.biot_savart(dom64, np.zeros(dom64.n_fluid), basis64)
    assert np.max(np.abs(k.x)) == 0 and np.max(np.abs(k.y)) == 0


def test_biot_savart_manufactured_second_order(dom32, dom64, basis64):
    errs = []
    for d, B in ((dom32, ell.harmonic_basis(dom32)), (dom64, basis64)):
        k = ell.biot_savart(d, d.evaluate(bump_lap).values, B)
        gx, gy = bump_grad(d.centers[:, 0], d.centers[:, 1])
        errs.append(max(np.max(np.abs(k.x + gy)), np.max(np.abs(k.y - gx))))
    assert errs[0] / errs[1] > 3


def test_biot_savart_has_no_circulation_or_flux(dom64, basis64):
    w = dom64.evaluate(lambda x, y: np.exp(-((x - 0.3) ** 2 + (y - 1) ** 2)))
    k = ell.biot_savart(dom64, w.values, basis64)
    for c in dom64.holes:
        assert abs(measure_circulation(k, c)) < 0.02 * w.integral()


def test_reconstruct_velocity_with_unit_circulation(dom64, basis64):
    zero_g = [c.trace(np.zeros(c.n_q)) for c in dom64.components]
    v = ell.reconstruct_velocity(dom64, np.zeros(dom64.n_fluid), zero_g, [1.0, 0.0], basis64)
    circ = [measure_circulation(v, c) for c in dom64.holes]
    assert abs(circ[0] - 1) < 0.02 and abs(circ[1]) < 0.02


def test_mid_channel_flux(dom64, basis64):
    traces = []
    for c in dom64.components:
        if c.id == 0:
            traces.append(c.trace(np.zeros(c.n_q)))
        else:
            sign = -1.0 if c.kind == "source" else 1.0
            traces.append(c.trace(np.full(c.n_q, sign / c.perimeter)))
    v = ell.reconstruct_velocity(dom64, np.zeros(dom64.n_fluid), traces, [0.0, 0.0], basis64)
    ys = np.linspace(-3, 3, 4001)
    ys = 0.5 * (ys[1:] + ys[:-1])
    vx = interpolate_bilinear(extend_to_grid(ScalarField(dom64, v.x), dom64), dom64.origin, dom64.h,
                              np.column_stack([np.zeros_like(ys), ys]))
    assert abs(np.nansum(vx) * (ys[1] - ys[0]) - 1.0) < 0.02


def test_decomposition_sums_to_velocity(dom64, basis64, model64):
    w = dom64.evaluate(lambda x, y: np.cos(x) * np.exp(-y * y)).values
    g = list(model64.g_traces(0.0).values())
    dec = ell.decompose_velocity(dom64, w, g, [0.2, -0.1], basis64)
    v = ell.reconstruct_velocity(dom64, w, g, [0.2, -0.1], basis64)
    total_x = dec.v_g.x + 0.2 * dec.X[0].x - 0.1 * dec.X[1].x + dec.k_h.x
    assert np.allclose(total_x, v.x, atol=1e-12)


# --- kernel columns ----------------------------------------------------------


def test_kernel_column_near_field(basis64):
    d = build_domain(reference_scenario(128).spec)
    B = ell.harmonic_basis(d)
    y = (0.0, 1.6)
    k = ell.kernel_column(d, y, B)
    i = d.fluid_cell_of(np.array(y) + np.array([10 * d.h, 0.0]))
    j = d.fluid_cell_of(y)
    fs = ell.free_space_kernel(d.centers[i], d.centers[j])
    assert np.hypot(k.x[i] - fs[0], k.y[i] - fs[1]) / np.hypot(*fs) < 0.10


def test_kernel_column_decay(dom64, basis64):
    y = np.array([0.0, 1.2])
    k = ell.kernel_column(dom64, y, basis64)
    r = np.hypot(*(dom64.centers - y).T)
    sd = dom64.signed_distance(dom64.centers)[0]
    far = (r > 4 * dom64.h) & (sd > 0.3)
    mag = np.hypot(k.x, k.y)[far]
    assert np.max(mag * r[far]) < 1.0  # |K(x, y)| <= C / |x - y| with C of order 1 / (2 pi)


def test_kernel_column_outside_fluid(dom64, basis64):
    with pytest.raises(PointOutsideFluid):
        ell.kernel_column(dom64, (1.5, 0.0), basis64)


def test_free_space_kernel_antisymmetric(rng):
    x, y = rng.normal(size=2), rng.normal(size=2)
    assert np.allclose(ell.free_space_kernel(x, y), -np.asarray(ell.free_space_kernel(y, x)))
