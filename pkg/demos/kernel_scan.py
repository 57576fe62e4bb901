"""How the symmetrized kernel behaves near the boundary.

For a test function that is constant on every boundary curve the kernel
H_phi stays bounded up to the wall.  For phi = x1, which varies along the
curves, it grows as the two points approach the boundary.  The scan prints
the maximum of |H_phi| per distance stratum, relative to the interior.
On coarse grids the finest stratum sits only a few cells from the wall and
the contrast between the two test functions is modest; it sharpens as
``grid_n`` grows (try 128 or 256).
"""

import sys

from sinkflow import weakform as wf
from sinkflow.scenario import reference_scenario
from sinkflow.transport import FlowModel

n = int(sys.argv[1]) if len(sys.argv) > 1 else 64
model = FlowModel.from_scenario(reference_scenario(n))
d, basis = model.domain, model.basis

tests = {
    "constant on curves": wf.make_c0_test(d, basis, [1.0, 0.5]),
    "phi = x1": wf.make_test(d, lambda x, y: x, lambda x, y: (1.0 + 0 * x, 0 * y)),
}
for name, phi in tests.items():
    rep = wf.h_phi_bound_scan(d, phi, basis)
    print(f"\n{name}: interior max {rep.interior_max:.4e}")
    for a, m, c in zip(rep.levels, rep.stratum_max, rep.stratum_count):
        print(f"  distance ~{a:.4f}: max {m:.4e} over {c} pairs, ratio {m / rep.interior_max:.2f}")
