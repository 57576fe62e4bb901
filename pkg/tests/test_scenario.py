import math

import numpy as np
import pytest

from sinkflow.cli import bundled_scenario
from sinkflow.domain import build_domain
from sinkflow.errors import ParseError, ValidationError
from sinkflow.scenario import DEFAULT_TOLERANCES, parse_scenario, reference_scenario, zero_scenario

BASE = bundled_scenario("reference").read_text()


def write(tmp_path, text):
    p = tmp_path / "s.toml"
    p.write_text(text)
    return p


def test_bundled_reference_matches_builder():
    assert parse_scenario(bundled_scenario("reference")) == reference_scenario(128)


def test_bundled_zero_scenario():
    sc = parse_scenario(bundled_scenario("zero"))
    assert sc.grid_n == 64 and sc.C_in == (0.0, 0.0)
    assert sc.omega_in_values(np.array([0.3]), np.array([0.2]))[0] == 0.0
    assert sc.omega_plus_max() == 0.0
    z = zero_scenario(64)
    assert (z.spec, z.holes[0].flux) == (sc.spec, sc.holes[0].flux)


def test_defaults_and_overrides():
    sc = reference_scenario(64, T=0.5, C_in=[0.0, 0.0])
    assert sc.T == 0.5 and sc.C_in == (0.0, 0.0) and sc.grid_n == 64
    assert sc.tolerances == DEFAULT_TOLERANCES
    assert sc.with_grid(32).grid_n == 32


def test_envelope_and_profiles():
    sc = reference_scenario(64)
    assert sc.envelope_at(0.5) == pytest.approx(1 + 0.2 * math.sin(math.pi / 2))
    assert np.allclose(sc.envelope_at(np.array([0.0, 1.0])), 1.0)
    th = np.linspace(0, 2 * math.pi, 8, endpoint=False)
    g = sc.g_profile(0, th)
    assert np.all(g < 0)
    assert g.mean() * 2 * math.pi * 0.5 == pytest.approx(-2.0, rel=1e-12)
    assert sc.omega_plus_at(0, np.array([0.5]), 0.0)[0] == pytest.approx(0.8)


def test_g_traces_have_zero_total_flux(dom64):
    sc = reference_scenario(64)
    tot = sum(float(tr.values @ dom64.components[tr.component].weights) for tr in sc.g_shape(dom64))
    assert abs(tot) < 1e-12


def test_initial_field(dom64):
    sc = reference_scenario(64)
    w = sc.omega_in_field(dom64)
    i = dom64.fluid_cell_of((0.5, 0.8))
    assert w.values[i] == pytest.approx(1.0, abs=0.05)


# --- validation -------------------------------------------------------------------


@pytest.mark.parametrize("old,new,msg", [
    ("flux = -2.0", "flux = 2.0", "SSC: g<0 on sources"),
    ("flux = 2.0\n", "flux = -2.0\n", "SSC: g>0 on sinks"),
    ("modulation = 0.3", "modulation = 1.5", "SSC: g<0 on sources"),
    ("amplitude = 0.2\n", "amplitude = -1.2\n", "SSC: envelope must stay positive"),
    ("flux = 2.0\n", "flux = 2.5\n", "SSC: zero average"),
    ("C_in = [0.3, -0.2]", "C_in = [0.3]", "C_in needs one value per hole"),
    ("T = 1.0", "T = -1.0", "T > 0"),
    ("nu = [4e-3, 2e-3, 1e-3, 5e-4]", "nu = [-1e-3]", "nonnegative"),
])
def test_validation_messages(tmp_path, old, new, msg):
    assert old in BASE
    with pytest.raises(ValidationError, match=msg):
        parse_scenario(write(tmp_path, BASE.replace(old, new, 1)))


def test_unknown_profile(tmp_path):
    with pytest.raises(ValidationError):
        parse_scenario(write(tmp_path, BASE.replace('profile = "gaussians"', 'profile = "vortex"')))


# --- parse errors -----------------------------------------------------------------


def test_missing_file(tmp_path):
    with pytest.raises(ParseError):
        parse_scenario(tmp_path / "nope.toml")


def test_syntax_error_has_line(tmp_path):
    text = BASE.replace("radius = 3.0", "radius = = 3.0")
    line = text.splitlines().index("radius = = 3.0") + 1
    with pytest.raises(ParseError) as exc:
        parse_scenario(write(tmp_path, text))
    assert exc.value.line == line


def test_bad_number_has_line_and_field(tmp_path):
    text = BASE.replace("radius = 3.0", 'radius = "big"')
    with pytest.raises(ParseError) as exc:
        parse_scenario(write(tmp_path, text))
    assert exc.value.field == "radius"
    assert exc.value.line == text.splitlines().index('radius = "big"') + 1
    assert "field 'radius'" in str(exc.value)


def test_missing_field(tmp_path):
    with pytest.raises(ParseError) as exc:
        parse_scenario(write(tmp_path, BASE.replace("flux = -2.0\n", "")))
    assert exc.value.field == "flux"


def test_bad_hole_kind(tmp_path):
    with pytest.raises(ParseError) as exc:
        parse_scenario(write(tmp_path, BASE.replace('kind = "source"', 'kind = "drain"')))
    assert exc.value.field == "kind"


def test_rectangle_outer(tmp_path):
    text = BASE.replace('shape = "disk"\ncenter = [0.0, 0.0]\nradius = 3.0',
                        'shape = "rectangle"\nxmin = -3.0\nymin = -2.5\nxmax = 3.0\nymax = 2.5')
    sc = parse_scenario(write(tmp_path, text))
    d = build_domain(sc.with_grid(32).spec)
    assert d.area == pytest.approx(30 - 2 * math.pi * 0.25)
