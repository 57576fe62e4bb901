"""Building a superlinear convex gauge for a uniformly integrable family.

The family min(x^(-1/2), 4j) on (0, 1) is dominated by an integrable
function, so a gauge G with sup_j int G(f_j) finite exists; the breakpoints
and the certified bound are printed.  The family j 1_(0, 1/j) keeps unit
mass while concentrating, and the construction rejects it.
"""

from sinkflow import analysis as an
from sinkflow.errors import NotUniformlyIntegrable

family, m = an.example_ui_family()
G = an.dlvp_gauge(family, m)
print("breakpoints:", " ".join(f"{x:.4g}" for x in G.N[:8]), "...")
print(f"sup_j int G(f_j) = {an.gauge_sup_integral(G, family, m):.4f} <= certified {G.certified_bound:.4f}")

family, m = an.example_concentrating_family()
try:
    an.dlvp_gauge(family, m)
    print("concentrating family accepted (unexpected)")
except NotUniformlyIntegrable as exc:
    print(f"concentrating family rejected: {exc}")
