"""Scenario data: geometry, boundary fluxes, inflow vorticity and run settings.

A scenario fixes everything a run needs apart from the viscosity.  The
boundary flux on hole ``k`` is

    g_k(theta, t) = e(t) * Q_k / (2 pi r_k) * (1 + a_k cos(theta - theta_k))

with a positive smooth envelope ``e``, so ``oint g_k = e(t) Q_k``.  Sources
carry ``Q_k < 0`` and sinks ``Q_k > 0``; the outer wall is impermeable.  The
inflow vorticity on a source is

    omega_plus(theta, t) = mean + amplitude cos(theta - phase) * (1 + tamp sin(2 pi t / period)).

Scenarios are read from TOML files with :func:`parse_scenario`; see
``scenarios/reference.toml`` for the layout.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .domain import BoundaryTrace, Disk, DomainSpec, Hole, Kind, Rectangle, ScalarField
from .errors import ParseError, ValidationError

DEFAULT_TOLERANCES = {
    "budget_slack": 0.05,  # slack >= -tol * rhs scale
    "linf_viscous_per_h": 10.0,  # ratio <= 1 + tol * h
    "linf_inviscid": 1e-12,
    "vorticity_residual": 0.05,  # relative to the total-vorticity scale
    "duality": 0.05,
    "weak_distributional": 0.05,
    "weak_renormalized": 0.05,
    "weak_symmetrized": 0.10,
}


@dataclass(frozen=True)
class HoleData:
    """Boundary data attached to one hole."""

    flux: float
    modulation: float = 0.0
    phase: float = 0.0
    omega_plus: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Scenario:
    """All inputs of a run except the viscosity.

    Attributes
    ----------
    spec : DomainSpec
    holes : tuple of HoleData
        One entry per hole of ``spec``.
    envelope : dict
        ``{"kind": "constant"}`` or ``{"kind": "oscillating", "amplitude": a, "period": P}``
        giving ``e(t) = 1 + a sin(2 pi t / P)``, ``|a| < 1``.
    omega_in : dict
        ``{"profile": "zero"}``, ``{"profile": "constant", "value": c}`` or
        ``{"profile": "gaussians", "bumps": [...], "constant": c}``.
    C_in : tuple of float
        Initial hole circulations.
    cfl : float
        Fixed step ``dt = cfl * h / velocity_scale`` (``velocity_scale`` is
        measured on the potential lift when not given).
    """

    id: str
    spec: DomainSpec
    holes: tuple
    envelope: dict
    omega_in: dict
    C_in: tuple
    T: float = 1.0
    p: float = 2.0
    nu: tuple = (1e-3,)
    stride: int = 1
    cfl: float = 0.2
    velocity_scale: float | None = None
    dt_max: float = 0.05
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    @property
    def grid_n(self) -> int:
        return self.spec.grid_n

    def with_grid(self, grid_n: int) -> "Scenario":
        return replace(self, spec=self.spec.with_grid(grid_n))

    def with_omega_in(self, omega_in: dict) -> "Scenario":
        return replace(self, omega_in=dict(omega_in))

    # --- data ------------------------------------------------------------------
    def envelope_at(self, t) -> np.ndarray | float:
        kind = self.envelope.get("kind", "constant")
        if kind == "constant":
            return np.ones_like(np.asarray(t, float)) if np.ndim(t) else 1.0
        a = float(self.envelope.get("amplitude", 0.0))
        P = float(self.envelope.get("period", 1.0))
        return 1.0 + a * np.sin(2 * math.pi * np.asarray(t, float) / P)

    def g_profile(self, k: int, theta) -> np.ndarray:
        """Flux density on hole ``k`` (0-based) at unit envelope."""
        hd, hole = self.holes[k], self.spec.holes[k]
        return hd.flux / (2 * math.pi * hole.radius) * (1 + hd.modulation * np.cos(theta - hd.phase))

    def g_shape(self, domain) -> list:
        """Boundary flux traces at unit envelope, one per hole."""
        return [BoundaryTrace(c.id, self.g_profile(c.id - 1, c.theta)) for c in domain.holes]

    def omega_plus_at(self, k: int, theta, t) -> np.ndarray:
        """Inflow vorticity on hole ``k`` (0-based) at polar angles ``theta``."""
        prof = self.holes[k].omega_plus
        theta = np.asarray(theta, float)
        kind = prof.get("profile", "constant")
        if kind == "constant":
            return np.full(theta.shape, float(prof.get("value", 0.0)))
        if kind == "harmonic":
            tamp = float(prof.get("time_amplitude", 0.0))
            per = float(prof.get("time_period", 1.0))
            mod = 1.0 + tamp * np.sin(2 * math.pi * np.asarray(t, float) / per)
            return float(prof.get("mean", 0.0)) + float(prof.get("amplitude", 0.0)) * np.cos(
                theta - float(prof.get("phase", 0.0))) * mod
        raise ValidationError(f"unknown omega_plus profile {kind!r}")

    def omega_plus_points(self, comp_id: int, pts, t) -> np.ndarray:
        hole = self.spec.holes[comp_id - 1]
        th = np.arctan2(pts[:, 1] - hole.center[1], pts[:, 0] - hole.center[0])
        return self.omega_plus_at(comp_id - 1, th, t)

    def omega_plus_traces(self, domain, t) -> dict:
        return {c.id: BoundaryTrace(c.id, self.omega_plus_at(c.id - 1, c.theta, t), t) for c in domain.sources}

    def omega_in_values(self, x, y) -> np.ndarray:
        prof = self.omega_in
        kind = prof.get("profile", "zero")
        out = np.zeros(np.broadcast(x, y).shape)
        if kind == "zero":
            return out
        if kind == "constant":
            return out + float(prof.get("value", 0.0))
        if kind == "gaussians":
            out = out + float(prof.get("constant", 0.0))
            for b in prof.get("bumps", []):
                cx, cy = b["center"]
                s = float(b["width"])
                out = out + float(b["amplitude"]) * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
            return out
        raise ValidationError(f"unknown omega_in profile {kind!r}")

    def omega_in_field(self, domain) -> ScalarField:
        return domain.evaluate(self.omega_in_values)

    def omega_plus_max(self, T: float | None = None) -> float:
        """Largest ``|omega_plus|`` over a fine angle/time sample."""
        T = self.T if T is None else T
        th = np.linspace(0, 2 * math.pi, 721)
        best = 0.0
        for k, h in enumerate(self.spec.holes):
            if h.kind != Kind.SOURCE:
                continue
            for t in np.linspace(0, T, 201):
                best = max(best, float(np.max(np.abs(self.omega_plus_at(k, th, t)))))
        return best

    # --- validation --------------------------------------------------------------
    def validate(self) -> "Scenario":
        """Check the source-sink compatibility and input conditions.

        Raises
        ------
        ValidationError
            With a message naming the violated condition.
        """
        if len(self.holes) != len(self.spec.holes):
            raise ValidationError("one data entry per hole is required")
        if len(self.C_in) != len(self.spec.holes):
            raise ValidationError("C_in needs one value per hole")
        if not (self.T > 0 and self.p >= 1 and self.stride >= 1 and self.cfl > 0):
            raise ValidationError("T > 0, p >= 1, stride >= 1 and cfl > 0 are required")
        if any(nu < 0 for nu in self.nu):
            raise ValidationError("viscosities must be nonnegative")
        times = np.linspace(0.0, self.T, 65)
        e = np.asarray(self.envelope_at(times), float) * np.ones_like(times)
        if np.any(e <= 0) or not np.all(np.isfinite(e)):
            raise ValidationError("SSC: envelope must stay positive")
        th = np.linspace(0, 2 * math.pi, 257)
        total = 0.0
        for k, (hole, hd) in enumerate(zip(self.spec.holes, self.holes)):
            g = np.multiply.outer(e, self.g_profile(k, th))
            if not np.all(np.isfinite(g)):
                raise ValidationError("SSC: flux must be finite")
            if hole.kind == Kind.SOURCE and not np.all(g < 0):
                raise ValidationError("SSC: g<0 on sources")
            if hole.kind == Kind.SINK and not np.all(g > 0):
                raise ValidationError("SSC: g>0 on sinks")
            total += hd.flux
        scale = max(1.0, sum(abs(hd.flux) for hd in self.holes))
        if abs(total) > 1e-12 * scale:
            raise ValidationError("SSC: zero average")
        for k, hole in enumerate(self.spec.holes):
            if hole.kind == Kind.SOURCE:
                for t in times:
                    if not np.all(np.isfinite(self.omega_plus_at(k, th, t))):
                        raise ValidationError("CIV: omega_plus must be finite")
        c = self.spec.outer
        if isinstance(c, Disk):
            xs = np.linspace(c.center[0] - c.radius, c.center[0] + c.radius, 33)
            ys = np.linspace(c.center[1] - c.radius, c.center[1] + c.radius, 33)
        else:
            xs, ys = np.linspace(c.xmin, c.xmax, 33), np.linspace(c.ymin, c.ymax, 33)
        X, Y = np.meshgrid(xs, ys)
        if not np.all(np.isfinite(self.omega_in_values(X, Y))):
            raise ValidationError("CIV: omega_in must be finite")
        if not np.all(np.isfinite(self.C_in)):
            raise ValidationError("CIV: initial circulations must be finite")
        return self


# ---------------------------------------------------------------------------
# TOML front end
# ---------------------------------------------------------------------------


def _line_of(text: str, key: str):
    m = re.search(rf"^\s*{re.escape(key)}\s*=", text, re.M)
    return text[: m.start()].count("\n") + 1 if m else None


def _need(table, key, where, text):
    if key not in table:
        raise ParseError(f"missing field in {where}", field=key)
    return table[key]


def _num(value, key, text):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseError("expected a number", line=_line_of(text, key), field=key)
    return float(value)


def _point(value, key, text):
    if not (isinstance(value, list) and len(value) == 2):
        raise ParseError("expected a two-element array", line=_line_of(text, key), field=key)
    return (_num(value[0], key, text), _num(value[1], key, text))


def scenario_from_dict(data: dict, text: str = "") -> Scenario:
    """Build and validate a scenario from a parsed TOML document."""
    outer = _need(data, "outer", "document", text)
    shape = outer.get("shape", "disk")
    if shape == "disk":
        o = Disk(_point(_need(outer, "center", "outer", text), "center", text),
                 _num(_need(outer, "radius", "outer", text), "radius", text))
    elif shape == "rectangle":
        o = Rectangle(*(_num(_need(outer, k, "outer", text), k, text) for k in ("xmin", "ymin", "xmax", "ymax")))
    else:
        raise ParseError(f"unknown outer shape {shape!r}", line=_line_of(text, "shape"), field="shape")
    holes, hdata = [], []
    for k, hd in enumerate(data.get("holes", [])):
        kind = hd.get("kind")
        if kind not in ("source", "sink"):
            raise ParseError(f"hole {k}: kind must be 'source' or 'sink'", line=_line_of(text, "kind"), field="kind")
        holes.append(Hole(_point(_need(hd, "center", f"hole {k}", text), "center", text),
                          _num(_need(hd, "radius", f"hole {k}", text), "radius", text), kind))
        hdata.append(HoleData(_num(_need(hd, "flux", f"hole {k}", text), "flux", text),
                              _num(hd.get("modulation", 0.0), "modulation", text),
                              _num(hd.get("phase", 0.0), "phase", text),
                              dict(hd.get("omega_plus", {}))))
    grid_n = int(_num(data.get("grid_n", 128), "grid_n", text))
    nu = data.get("nu", [1e-3])
    nu = tuple(_num(x, "nu", text) for x in (nu if isinstance(nu, list) else [nu]))
    tol = dict(DEFAULT_TOLERANCES)
    tol.update({k: _num(v, k, text) for k, v in data.get("tolerances", {}).items()})
    C_in = tuple(_num(x, "C_in", text) for x in data.get("C_in", [0.0] * len(holes)))
    vs = data.get("velocity_scale")
    sc = Scenario(
        id=str(data.get("id", "scenario")),
        spec=DomainSpec(o, tuple(holes), grid_n),
        holes=tuple(hdata),
        envelope=dict(data.get("envelope", {"kind": "constant"})),
        omega_in=dict(data.get("omega_in", {"profile": "zero"})),
        C_in=C_in,
        T=_num(data.get("T", 1.0), "T", text),
        p=_num(data.get("p", 2.0), "p", text),
        nu=nu,
        stride=int(_num(data.get("stride", 1), "stride", text)),
        cfl=_num(data.get("cfl", 0.2), "cfl", text),
        velocity_scale=None if vs is None else _num(vs, "velocity_scale", text),
        dt_max=_num(data.get("dt_max", 0.05), "dt_max", text),
        tolerances=tol,
    )
    return sc.validate()


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file.

    Raises
    ------
    ParseError
        Unreadable file, TOML syntax error or a malformed field (with line
        and field information when available).
    ValidationError
        Data violating the source-sink compatibility or input conditions.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ParseError(str(exc), line=int(m.group(1)) if m else None) from exc
    return scenario_from_dict(data, text)


def reference_scenario(grid_n: int = 128, **overrides) -> Scenario:
    """The two-hole reference configuration used throughout the tests."""
    data = {
        "id": "reference",
        "grid_n": grid_n,
        "T": 1.0,
        "p": 2,
        "nu": [4e-3, 2e-3, 1e-3, 5e-4],
        "C_in": [0.3, -0.2],
        "stride": 10,
        "outer": {"shape": "disk", "center": [0.0, 0.0], "radius": 3.0},
        "envelope": {"kind": "oscillating", "amplitude": 0.2, "period": 2.0},
        "holes": [
            {"center": [-1.5, 0.0], "radius": 0.5, "kind": "source", "flux": -2.0,
             "modulation": 0.3, "phase": 0.0,
             "omega_plus": {"profile": "harmonic", "mean": 0.5, "amplitude": 0.3, "phase": 0.5,
                            "time_amplitude": 0.2, "time_period": 1.0}},
            {"center": [1.5, 0.0], "radius": 0.5, "kind": "sink", "flux": 2.0,
             "modulation": 0.2, "phase": math.pi},
        ],
        "omega_in": {"profile": "gaussians",
                     "bumps": [{"amplitude": 1.0, "center": [0.5, 0.8], "width": 0.5},
                               {"amplitude": -0.6, "center": [-0.3, -1.2], "width": 0.4}]},
    }
    data.update(overrides)
    return scenario_from_dict(data)


def zero_scenario(grid_n: int = 64) -> Scenario:
    """Reference geometry and fluxes with all vorticity data set to zero."""
    sc = reference_scenario(grid_n)
    holes = tuple(replace(hd, omega_plus={"profile": "constant", "value": 0.0}) for hd in sc.holes)
    return replace(sc, id="zero", holes=holes, omega_in={"profile": "zero"}, C_in=(0.0, 0.0))
