import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.special_fn import (g_theta, g_theta_antiderivative, gtheta_table, heat_kernel,
                               heat_kernel_r2)

# arbitrary-precision values of int_0^inf e^{(theta - gamma) u} t^{u-1} / Gamma(u) du
# and of the matching antiderivative, from mpmath at 30 digits
ORACLE = [
    (0.0, 0.5, 0.91594020551279761, 0.75882448884105962),
    (2.0, 0.1, 7.1729432001147866, 0.98319078370291198),
    (-2.0, 1.0, 0.15131106501512198, 0.41116377319172287),
    (0.0, 1e-3, 19.394278784387336, 0.1408345782679046),
    (1.0, 0.9, 6.1248414340101263, 3.525840968874017),
]


@pytest.mark.parametrize("theta,t,g,gbar", ORACLE)
def test_density_matches_high_precision(theta, t, g, gbar):
    assert g_theta(theta, t) == pytest.approx(g, rel=1e-13)
    assert g_theta_antiderivative(theta, t) == pytest.approx(gbar, rel=1e-13)


@pytest.mark.parametrize("theta,t,g,gbar", ORACLE)
def test_table_matches_direct(theta, t, g, gbar):
    tab = gtheta_table(theta)
    assert float(tab.G(t)) == pytest.approx(g, rel=1e-9)
    assert float(tab.Gbar(t)) == pytest.approx(gbar, rel=1e-9)


def test_time_outside_unit_interval_rejected():
    with pytest.raises(ValueError):
        g_theta(0.0, 1.5)
    with pytest.raises(ValueError):
        g_theta(0.0, 0.0)


@given(st.floats(-3, 3), st.floats(1e-6, 0.99))
def test_antiderivative_is_increasing_and_positive(theta, t):
    a = g_theta_antiderivative(theta, t)
    b = g_theta_antiderivative(theta, min(1.0, t * 1.01))
    assert 0 < a < b


@given(st.floats(-3, 3), st.floats(1e-3, 0.9))
def test_derivative_of_antiderivative(theta, t):
    h = 1e-5 * t
    fd = (g_theta_antiderivative(theta, t + h) - g_theta_antiderivative(theta, t - h)) / (2 * h)
    assert fd == pytest.approx(g_theta(theta, t), rel=1e-6)


@given(st.floats(-3, 3), st.floats(0.0, 1.0))
def test_inverse_round_trip(theta, frac):
    tab = gtheta_table(theta)
    v = tab.gbar_min + frac * (tab.gbar_one - tab.gbar_min)
    t = float(tab.Gbar_inv(v))
    assert float(tab.Gbar(t)) == pytest.approx(v, rel=1e-8)


def test_heat_kernel_normalized_and_consistent():
    from scipy import integrate
    mass = integrate.quad(lambda r: 2 * np.pi * r * heat_kernel_r2(1.3, r * r), 0, np.inf)[0]
    assert mass == pytest.approx(1.0, abs=1e-8)
    x = np.array([0.3, -0.4])
    assert float(heat_kernel(0.7, x)) == pytest.approx(float(heat_kernel_r2(0.7, 0.25)))
    assert float(heat_kernel_r2(1.0, 0.0)) == pytest.approx(1 / (2 * math.pi))
