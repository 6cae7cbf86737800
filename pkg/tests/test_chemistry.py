import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from movemesh.chemistry import (GAS_CONSTANT, MechanismError, Reaction, arrhenius_rate,
                                density_eos, full_fractions, heat_release, load_mechanism,
                                mixture_molar_mass, parse_mechanism, production_rates)
from movemesh.driver import data_path

TOY = """
[species]
A  1.0  1.0e6  1000
B  1.0  0.0    1000
[reactions]
A -> B   1.0  0  0
"""

PAIR = """
[species]
X  1.0  0  1000
Y  2.0  0  1000
Z  3.0  0  1000
[reactions]
X + Y -> Z   1.0  0  0
"""


@pytest.fixture(scope="module")
def ozone():
    return load_mechanism(data_path("ozone.mech"))


def test_arrhenius_examples():
    T = 1000.0
    r = Reaction({"A": 1}, {"B": 1}, A=2.0, b=0.0, Ea=2 * GAS_CONSTANT * T)
    assert arrhenius_rate(r, T) == pytest.approx(2 * math.exp(-2), rel=1e-14)
    assert arrhenius_rate(r, T) == pytest.approx(0.270671, abs=1e-6)
    r2 = Reaction({"A": 1}, {"B": 1}, A=3.0, b=2.0)
    assert arrhenius_rate(r2, 10.0) == pytest.approx(300.0)
    with pytest.raises(ValueError):
        arrhenius_rate(r, 0.0)


def test_mass_action_hand_example():
    mech = parse_mechanism(PAIR)
    # concentrations rho w / M = (2, 5, 0) mol/m^3 at rho = 12
    w = np.array([2.0, 10.0, 0.0])
    w = w / w.sum()
    rho = 12.0
    wdot, f = production_rates(mech, 500.0, w, rho)
    np.testing.assert_allclose(wdot, [-10.0, -10.0, 10.0], rtol=1e-14)
    np.testing.assert_allclose(f, [-10.0, -20.0, 30.0], rtol=1e-14)


def test_heat_release_toy():
    mech = parse_mechanism(TOY)
    f0 = heat_release(mech, np.array([298.0]), np.array([[1.0, 0.0]]), np.array([1.0]))
    np.testing.assert_allclose(f0, [1.0e6], rtol=1e-14)


def test_heat_release_zero_for_equal_enthalpies():
    mech = parse_mechanism(TOY.replace("1.0e6", "0.0"))
    rng = np.random.default_rng(0)
    w = rng.dirichlet([1, 1], 50)
    T = rng.uniform(300, 2000, 50)
    np.testing.assert_allclose(heat_release(mech, T, w, np.ones(50)), 0.0, atol=1e-9)


def test_mixture_examples(ozone):
    M = mixture_molar_mass(ozone, [0.0, 0.8, 0.2])
    assert M == pytest.approx(1 / (0.8 / 0.031998 + 0.2 / 0.047997), rel=1e-14)
    assert M == pytest.approx(0.0342857, rel=1e-4)
    rho = density_eos(101325.0, M, 298.0)
    assert rho == pytest.approx(101325.0 * M / (GAS_CONSTANT * 298.0), rel=1e-14)
    assert rho == pytest.approx(1.4020, rel=1e-4)
    np.testing.assert_allclose(full_fractions([0.1, 0.6]), [0.1, 0.6, 0.3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ozone_mass_conservation(seed):
    ozone = load_mechanism(data_path("ozone.mech"))
    rng = np.random.default_rng(seed)
    w = rng.dirichlet([0.5, 0.5, 0.5], 10)
    T = rng.uniform(250, 3000, 10)
    rho = rng.uniform(0.1, 5, 10)
    _, f = production_rates(ozone, T, w, rho)
    scale = np.abs(f).max(axis=1) + 1e-300
    np.testing.assert_allclose(f.sum(axis=1) / scale, 0.0, atol=1e-13)


def test_zero_rates_when_scaled_off(ozone):
    wdot, _ = production_rates(ozone.with_rates_scaled(0.0), 1500.0, [0.1, 0.7, 0.2], 1.0)
    np.testing.assert_array_equal(wdot, 0.0)


def test_negative_fraction_beyond_tolerance(ozone):
    with pytest.raises(ValueError):
        production_rates(ozone, 300.0, [-1e-3, 0.8, 0.201], 1.0)
    # within tolerance is clipped silently
    production_rates(ozone, 300.0, [-1e-10, 0.8, 0.2], 1.0)


@pytest.mark.parametrize("text, match", [
    ("[species]\nA 1 0 1000\nB 2 0 1000\n[reactions]\nA -> B 1 0 0\n", "conserve mass"),
    ("[species]\nA 1 0 1000\nB 1 0 1000\n[reactions]\nA -> C 1 0 0\n", "unknown species"),
    ("[species]\nA 1 0\n", "line 2"),
    ("[species]\nA 1 0 1000\nB 1 0 1000\n[reactions]\nA + M -> B 1 0 0\n", "third body"),
    ("[species]\nA 1 0 1000\nB 1 0 1000\n[reactions]\nA => B 1 0 0\n", "->"),
    ("[species]\nA 1 0 1000\nB 1 0 1000\n[reactions]\nA -> B one 0 0\n", "Arrhenius"),
    ("[stuff]\n", "unknown section"),
    ("A 1 0 1000\n", "outside a section"),
    ("[species]\nA -1 0 1000\nB 1 0 1000\n", "molar mass"),
])
def test_parser_errors(text, match):
    with pytest.raises(MechanismError, match=match):
        parse_mechanism(text)


def test_third_body_efficiencies():
    text = """
[species]
A 1 0 1000
B 1 0 1000
[reactions]
A + M -> B + M   1 0 0  eff: B=3
"""
    mech = parse_mechanism(text)
    # [M] = c_A + 3 c_B = 1 + 3 with c = (1, 1)
    wdot, _ = production_rates(mech, 300.0, [0.5, 0.5], 2.0)
    np.testing.assert_allclose(wdot, [-4.0, 4.0], rtol=1e-14)


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.mech"):
        load_mechanism(tmp_path / "nope.mech")


def test_shipped_mechanism_shape(ozone):
    assert ozone.names == ["O", "O2", "O3"]
    assert len(ozone.reactions) == 6
    assert sum(r.third_body for r in ozone.reactions) == 4
