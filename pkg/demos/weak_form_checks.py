"""Weak-form bookkeeping on a computed viscous solution.

The discrete solution is paired with a smooth test function and with the
C0 test function that is constant on each hole.  Each weak identity is
printed term by term so that the cancellation is visible, followed by the
duality pairing against an adjoint solution started from a bump.
"""

import sys

from sinkflow import weakform as wf
from sinkflow.cli import _interior_point
from sinkflow.scenario import reference_scenario
from sinkflow.transport import FlowModel, run_scenario

n = int(sys.argv[1]) if len(sys.argv) > 1 else 64
sc = reference_scenario(n)
model = FlowModel.from_scenario(sc)
d = model.domain
rec = run_scenario(sc, 1e-3, model=model)

smooth = wf.make_test(d, lambda x, y: 1 + 0.3 * x - 0.2 * y + 0.1 * x * y,
                      lambda x, y: (0.3 + 0.1 * y, -0.2 + 0.1 * x))
c0 = wf.make_c0_test(d, model.basis, [1.0, 0.5])


def show(rep):
    print(f"\n{rep.name}")
    for k, v in rep.terms.items():
        print(f"  {rep.signs[k]:+d} x {k:<12s} {v:+.6e}")
    print(f"  total {rep.total:+.3e}, relative {rep.relative:.3e}")


show(wf.distributional_residual(rec, smooth))
show(wf.renormalized_residual(rec, smooth))
show(wf.symmetrized_residual(rec, c0, model.basis))

chi, _ = wf.bump(_interior_point(d, 0), 0.8)
_, phi_T = wf.bump(_interior_point(d, 1), 0.8)
dual = wf.duality_check(rec, chi=chi, Psi=0.0, phi_T=phi_T)
print("\nduality")
for k, v in dual.terms.items():
    print(f"  {k:<8s} {v:+.6e}")
print(f"  lhs - rhs = {dual.residual:+.3e}, relative {dual.relative:.3e}")
