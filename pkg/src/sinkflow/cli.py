"""Command line front end: ``sinkflow run|sweep|check|kernel|dlvp``.

Exit codes: 0 when every configured assertion passes, 2 for unreadable or
malformed scenario files, 3 for data that violate the compatibility
conditions, 4 for solver failures and 5 for failed assertions.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AssertionFailed, ParseError, SinkflowError, SolverError, ValidationError

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_SOLVER = 4
EXIT_ASSERTION = 5

THREADS_ENV = "SINKFLOW_THREADS"


class CheckFailed(AssertionFailed):
    """One or more configured checks did not pass."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def bundled_scenario(name: str = "reference") -> Path:
    """Path of a scenario file shipped with the package."""
    return Path(str(resources.files("sinkflow") / "scenarios" / f"{name}.toml"))


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ParseError(f"{THREADS_ENV} must be an integer, got {env!r}", field=THREADS_ENV) from None
    return 1


def _nu_list(text: str):
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ParseError(f"--nu expects a comma separated list of numbers, got {text!r}", field="nu") from None
    if not vals or any(v < 0 for v in vals):
        raise ParseError("--nu needs non-negative values", field="nu")
    return tuple(vals)


def _load(args):
    from .scenario import parse_scenario

    sc = parse_scenario(args.scenario or bundled_scenario())
    if args.grid is not None:
        sc = sc.with_grid(args.grid)
    nus = _nu_list(args.nu) if args.nu else sc.nu
    tol = {k: v * args.tol_scale for k, v in sc.tolerances.items()}
    return sc, nus, tol


class _Report:
    """Collects check lines and an aggregate verdict."""

    def __init__(self):
        self.lines = []
        self.failed = []

    def check(self, name: str, value: float, bound: float, ok: bool | None = None, below: bool = True):
        ok = (value <= bound if below else value >= bound) if ok is None else ok
        rel = "<=" if below else ">="
        self.lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {value:.6e} {rel} {bound:.6e}")
        if not ok:
            self.failed.append(name)

    def note(self, text: str):
        self.lines.append(f"      {text}")

    def write(self, path: Path, header: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        verdict = "PASS" if not self.failed else f"FAIL ({len(self.failed)} checks)"
        path.write_text("\n".join([header, *self.lines, f"overall: {verdict}", ""]))


def _manifest(out: Path, args, extra: dict):
    lines = [f"sinkflow {__version__}", f"command: {args.command}",
             f"scenario: {args.scenario or bundled_scenario()}",
             f"python: {sys.version.split()[0]}", f"numpy: {np.__version__}"]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_record(record, out: Path, scenario=None) -> None:
    """Write a run directory: fields, circulations, budgets and a run report."""
    from .analysis import g_budget, linf_bound, lp_budget
    from .domain import ScalarField, export_csv, export_f64

    out.mkdir(parents=True, exist_ok=True)
    d = record.domain
    fields = out / "fields"
    fields.mkdir(exist_ok=True)
    for k in record.snapshot_indices:
        f = ScalarField(d, record.omega[k])
        export_csv(f, fields / f"omega_{k:05d}.csv")
        export_f64(f, fields / f"omega_{k:05d}.f64")
    N = d.n_holes
    with open(out / "circulations.csv", "w") as fh:
        fh.write(",".join(["t"] + [f"C_{i + 1}" for i in range(N)] + ["C_outer", "residual"]) + "\n")
        for k, t in enumerate(record.times):
            res = float(np.dot(d.volumes, record.omega[k])) - record.C_outer - float(record.C[k].sum())
            row = [t, *record.C[k], record.C_outer, res]
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    budgets = out / "budgets"
    budgets.mkdir(exist_ok=True)
    qs = sorted({1.0, 2.0, 4.0} | ({float(scenario.p)} if scenario is not None else set()))
    for q in qs:
        lp_budget(record, q).to_csv(budgets / f"lp_{q:g}.csv")
    g_budget(record).to_csv(budgets / "gauge.csv")
    with open(budgets / "mass_ledger.csv", "w") as fh:
        fh.write("t,ledger\n")
        for t, v in zip(record.times[1:], record.mass_ledger):
            fh.write(f"{float(t):.17g},{float(v):.17g}\n")
    rep = out / "reports"
    rep.mkdir(exist_ok=True)
    lines = [f"scenario: {record.scenario_id}", f"nu: {float(record.nu):.17g}", f"grid cells: {d.n_fluid}",
             f"h: {float(d.h):.17g}", f"steps: {record.n_steps}", f"T: {float(record.T):.17g}",
             f"linf ratio: {float(linf_bound(record)):.17g}", f"stalls: {int(np.sum(record.stalls))}",
             f"max |mass ledger|: {float(np.max(np.abs(record.mass_ledger), initial=0.0)):.17g}",
             f"failure: {record.failure}"]
    (rep / "run.txt").write_text("\n".join(lines) + "\n")


def _nu_dir(out: Path, nu: float) -> Path:
    return out / f"nu_{nu:g}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    from .transport import FlowModel, run_scenario

    sc, nus, _ = _load(args)
    out = Path(args.out)
    model = FlowModel.from_scenario(sc)
    _manifest(out, args, {"grid_n": sc.spec.grid_n, "nu": ",".join(f"{v:g}" for v in nus),
                          "threads": _threads(args)})
    code = EXIT_OK
    for nu in nus:
        rec = run_scenario(sc, nu, model=model)
        write_record(rec, _nu_dir(out, nu), sc)
        print(f"run nu={nu:g}: {rec.n_steps} steps, T={rec.T:g}" + (f", FAILED: {rec.failure}" if rec.failure else ""))
        if rec.failure:
            code = EXIT_SOLVER
    return code


def cmd_sweep(args) -> int:
    from .analysis import nu_sweep

    sc, nus, _ = _load(args)
    nus = tuple(sorted(nus, reverse=True))
    out = Path(args.out)
    workers = _threads(args)
    _manifest(out, args, {"grid_n": sc.spec.grid_n, "nu": ",".join(f"{v:g}" for v in nus), "threads": workers})
    rep = nu_sweep(sc, nus, workers=workers, frozen_velocity=args.frozen)
    rdir = out / "reports"
    rdir.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("nu_a,nu_b,terminal_distance,trace_distance,circulation_distance\n")
        for i in range(len(nus) - 1):
            row = (nus[i], nus[i + 1], rep.terminal_distance[i], rep.trace_distance[i], rep.circulation_distance[i])
            fh.write(",".join(f"{float(v):.17g}" for v in row) + "\n")
    r = _Report()
    r.check("terminal distances decreasing", 0.0, 0.0, ok=rep.decreasing(rep.terminal_distance))
    r.check("trace distances decreasing", 0.0, 0.0, ok=rep.decreasing(rep.trace_distance))
    r.note("terminal: " + " ".join(f"{v:.4e}" for v in rep.terminal_distance))
    r.note("trace: " + " ".join(f"{v:.4e}" for v in rep.trace_distance))
    if rep.reference_distance is not None:
        r.note(f"distance of the smallest viscosity to the inviscid run: {rep.reference_distance:.4e}")
    r.write(rdir / "sweep.txt", f"sweep of {sc.id} at grid_n={sc.spec.grid_n}")
    print("\n".join(r.lines))
    if r.failed:
        raise CheckFailed(", ".join(r.failed))
    return EXIT_OK


def check_record(record, scenario, tol: dict, basis=None) -> _Report:
    """All budget, bound, residual and duality checks of one run."""
    from . import weakform as wf
    from .analysis import g_budget, linf_bound, lp_budget

    d = record.domain
    basis = basis if basis is not None else record.model.basis
    r = _Report()
    if record.failure:
        r.check("run completed", 0.0, 0.0, ok=False)
        r.note(record.failure)
        return r
    res = np.array([float(np.dot(d.volumes, record.omega[k])) - record.C_outer - float(record.C[k].sum())
                    for k in range(len(record.times))])
    scale = max(float(np.max(np.abs(record.omega) @ d.volumes)), 1e-300)
    r.check("total vorticity residual (relative)", float(np.max(np.abs(res))) / scale, tol["vorticity_residual"])
    for q in sorted({1.0, 2.0, 4.0, float(scenario.p)}):
        b = lp_budget(record, q)
        r.check(f"L^{q:g} budget slack (relative, min)", float(np.min(b.relative_slack)), -tol["budget_slack"],
                below=False)
    gb = g_budget(record)
    r.check("gauge budget slack (relative, min)", float(np.min(gb.relative_slack)), -tol["budget_slack"], below=False)
    ratio = linf_bound(record)
    bound = 1 + (tol["linf_viscous_per_h"] * d.h if record.nu > 0 else tol["linf_inviscid"])
    r.check("L^inf ratio", ratio, bound)
    T = record.T
    phi = wf.make_test(d, lambda x, y: 1 + 0.3 * x - 0.2 * y + 0.1 * x * y,
                       lambda x, y: (0.3 + 0.1 * y, -0.2 + 0.1 * x), T=T)
    r.check("distributional residual", wf.distributional_residual(record, phi).relative, tol["weak_distributional"])
    r.check("renormalized residual", wf.renormalized_residual(record, phi).relative, tol["weak_renormalized"])
    if d.n_holes:
        beta = np.linspace(1.0, 0.5, d.n_holes)
        c0 = wf.make_c0_test(d, basis, beta, T=T)
        r.check("symmetrized residual", wf.symmetrized_residual(record, c0, basis).relative, tol["weak_symmetrized"])
    chi, _ = wf.bump(_interior_point(d, 0), 0.8)
    _, phi_T = wf.bump(_interior_point(d, 1), 0.8)
    r.check("duality residual", wf.duality_check(record, chi=chi, phi_T=phi_T).relative, tol["duality"])
    return r


def _interior_point(domain, which: int):
    """A deterministic point well inside the fluid (deepest, or deepest in the lower half)."""
    sd, _ = domain.signed_distance(domain.centers)
    c = domain.centers
    mask = c[:, 1] < np.median(c[:, 1]) if which else c[:, 1] >= np.median(c[:, 1])
    i = np.flatnonzero(mask)[np.argmax(sd[mask])]
    return tuple(c[i])


def cmd_check(args) -> int:
    from .transport import FlowModel, run_scenario

    sc, nus, tol = _load(args)
    out = Path(args.out)
    _manifest(out, args, {"grid_n": sc.spec.grid_n, "nu": ",".join(f"{v:g}" for v in nus),
                          "tol_scale": args.tol_scale})
    model = FlowModel.from_scenario(sc)
    failed = []
    for nu in nus:
        rec = run_scenario(sc, nu, model=model)
        ndir = _nu_dir(out, nu)
        write_record(rec, ndir, sc)
        rep = check_record(rec, sc, tol, model.basis)
        rep.write(ndir / "reports" / "check.txt", f"checks for {sc.id}, nu={nu:g}, grid_n={sc.spec.grid_n}")
        print(f"nu={nu:g}")
        print("\n".join(rep.lines))
        failed += [f"nu={nu:g}: {f}" for f in rep.failed]
    if failed:
        raise CheckFailed("; ".join(failed))
    return EXIT_OK


def halfplane_oracle(n_pairs: int = 1000, seed: int = 0):
    """Compare the closed-form half-plane kernel with its two building blocks.

    Returns ``(max relative deviation from the sum of gradients, max
    deviation of the gradients from central differences of the Green
    function, max |tangential component|)``.
    """
    from .weakform import halfplane_green, halfplane_green_gradient, halfplane_symmetrized_kernel

    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.uniform(-2, 2, n_pairs), rng.uniform(0.05, 2, n_pairs)])
    y = np.column_stack([rng.uniform(-2, 2, n_pairs), rng.uniform(0.05, 2, n_pairs)])
    far = np.hypot(*(x - y).T) > 1e-3
    x, y = x[far], y[far]
    k = halfplane_symmetrized_kernel(x, y)
    s = halfplane_green_gradient(x, y) + halfplane_green_gradient(y, x)
    dev = float(np.max(np.abs(k - s) / np.maximum(np.abs(k).max(axis=1, keepdims=True), 1e-300)))
    eps = 1e-6
    fd = np.zeros_like(x)
    for j in range(2):
        e = np.zeros(2)
        e[j] = eps
        fd[:, j] = (halfplane_green(x + e, y) - halfplane_green(x - e, y)) / (2 * eps)
    g = halfplane_green_gradient(x, y)
    fd_dev = float(np.max(np.abs(fd - g) / np.maximum(np.abs(g).max(axis=1, keepdims=True), 1e-12)))
    return dev, fd_dev, float(np.max(np.abs(k[:, 0])))


def cmd_kernel(args) -> int:
    from . import weakform as wf
    from .domain import build_domain
    from . import elliptic as ell

    sc, _, tol = _load(args)
    out = Path(args.out)
    _manifest(out, args, {"grid_n": sc.spec.grid_n})
    r = _Report()
    dev, fd_dev, tang = halfplane_oracle()
    r.check("half-plane closed form vs sum of gradients", dev, 1e-12)
    r.check("half-plane tangential component", tang, 0.0)
    r.check("Green gradient vs central differences", fd_dev, 1e-6)
    d = build_domain(sc.spec)
    basis = ell.harmonic_basis(d)
    if d.n_holes:
        c0 = wf.make_c0_test(d, basis, np.linspace(1.0, 0.5, d.n_holes))
        s0 = wf.h_phi_bound_scan(d, c0, basis)
        r.check("C0 test function: finest stratum / interior", s0.ratio, 5.0)
        x1 = wf.make_test(d, lambda x, y: x, lambda x, y: (np.ones_like(x), np.zeros_like(x)))
        s1 = wf.h_phi_bound_scan(d, x1, basis)
        r.check("phi = x1: finest stratum exceeds C0 ratio", s1.ratio, s0.ratio, below=False)
        r.note(f"phi = x1 finest / interior: {s1.ratio:.3f} (negative control)")
        (out / "reports").mkdir(parents=True, exist_ok=True)
        with open(out / "reports" / "scan.csv", "w") as fh:
            fh.write("level,c0_max,x1_max\n")
            for a, m0, m1 in zip(s0.levels, s0.stratum_max, s1.stratum_max):
                fh.write(f"{float(a):.17g},{float(m0):.17g},{float(m1):.17g}\n")
            fh.write(f"interior,{float(s0.interior_max):.17g},{float(s1.interior_max):.17g}\n")
    r.write(out / "reports" / "kernel.txt", f"kernel checks at grid_n={sc.spec.grid_n}")
    print("\n".join(r.lines))
    if r.failed:
        raise CheckFailed(", ".join(r.failed))
    return EXIT_OK


def cmd_dlvp(args) -> int:
    from .analysis import dlvp_gauge, example_concentrating_family, example_ui_family, gauge_sup_integral
    from .errors import NotUniformlyIntegrable

    out = Path(args.out)
    _manifest(out, args, {"members": args.members})
    r = _Report()
    fam, m = example_ui_family(args.members)
    G = dlvp_gauge(fam, m)
    sup = gauge_sup_integral(G, fam, m)
    r.check("certified bound dominates sup_j int G(|f_j|)", sup, G.certified_bound)
    r.note("breakpoints: " + " ".join(f"{v:.4g}" for v in G.N))
    fam2, m2 = example_concentrating_family(args.members)
    try:
        dlvp_gauge(fam2, m2)
        rejected = False
    except NotUniformlyIntegrable:
        rejected = True
    r.check("concentrating family rejected", float(rejected), 1.0, below=False)
    with open(out / "gauge.csv", "w") as fh:
        fh.write("level,breakpoint,value\n")
        for i, (n, v) in enumerate(zip(G.N, G.values)):
            fh.write(f"{i},{float(n):.17g},{float(v):.17g}\n")
    r.write(out / "reports" / "dlvp.txt", "de la Vallee Poussin gauge")
    print("\n".join(r.lines))
    if r.failed:
        raise CheckFailed(", ".join(r.failed))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", help="scenario TOML file (default: the bundled reference scenario)")
    common.add_argument("--out", default="sinkflow_out", help="output directory")
    common.add_argument("--nu", help="comma separated viscosities overriding the scenario list")
    common.add_argument("--grid", type=int, help="cells per axis overriding the scenario")
    common.add_argument("--tol-scale", type=float, default=1.0, help="multiply every tolerance")
    common.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p = argparse.ArgumentParser(prog="sinkflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sinkflow {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="integrate a scenario and write run directories")
    sw = sub.add_parser("sweep", parents=[common], help="vanishing-viscosity sweep")
    sw.add_argument("--frozen", action="store_true", help="freeze the velocity (transport-only sweep)")
    sub.add_parser("check", parents=[common], help="run and verify budgets, residuals and duality")
    sub.add_parser("kernel", parents=[common], help="half-plane oracle and H_phi scans")
    dl = sub.add_parser("dlvp", parents=[common], help="gauge construction and certificates")
    dl.add_argument("--members", type=int, default=20, help="family size")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "check": cmd_check, "kernel": cmd_kernel, "dlvp": cmd_dlvp}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as parse errors
        return EXIT_OK if exc.code == 0 else EXIT_PARSE
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    except SinkflowError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    print(f"done in {time.perf_counter() - t0:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
