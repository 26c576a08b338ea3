import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.eta_bound import (eta_closed, eta_lower, phi_bar, psi_bar_delta, psi_bar_zero,
                              radial_mean)
from shflab.kernels import k2_second_moment

# E[Psi0^2] - 1 with the Gaussian integral done in closed form (high order rule)
ETA = {(0.25, -2.0): 0.0086884, (0.25, 0.0): 0.0198605, (0.25, 2.0): 0.0674362,
       (0.5, -2.0): 0.0111984, (0.5, 0.0): 0.0287396, (0.5, 2.0): 0.1125821,
       (1.0, -2.0): 0.0149102, (1.0, 0.0): 0.0440256, (1.0, 2.0): 0.1785812}


@pytest.mark.parametrize("key", sorted(ETA))
def test_eta_value_and_two_routes(key):
    t, theta = key
    rep = eta_lower(t, theta)
    assert rep.eta > 0
    assert rep.eta == pytest.approx(ETA[key], abs=2e-7)
    assert rep.closed_form == pytest.approx(rep.eta, rel=1e-8)
    assert rep.eta_error <= 1e-6 * rep.eta
    assert rep.normalization_residual < 1e-8


@pytest.mark.parametrize("delta", [0.25, 0.5])
def test_phi_bar_equals_k2_route(delta):
    assert phi_bar(1.0, 0.0, delta) == pytest.approx(k2_second_moment(1.0, 0.0, delta), abs=1e-9)


def test_phi_bar_decreases_in_delta():
    vals = [phi_bar(1.0, 0.0, d) for d in (0.01, 0.1, 1.0)]
    assert vals[0] > vals[1] > vals[2] > 1.0


@pytest.mark.parametrize("t,theta,delta", [(1.0, 0.0, 0.25), (0.5, 2.0, 0.1), (0.25, -2.0, 1.0)])
def test_finite_delta_weight_normalized(t, theta, delta):
    mass = radial_mean(lambda r: psi_bar_delta(r, t, theta, delta), t + 2 * delta)
    assert mass == pytest.approx(1.0, abs=1e-8)


def test_zero_delta_weight_normalized():
    assert radial_mean(lambda r: psi_bar_zero(r, 1.0, 0.0), 1.0) == pytest.approx(1.0, abs=1e-10)


def test_weights_at_reference_radii():
    y = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(psi_bar_delta(y, 1.0, 0.0, 0.25), [1.2797, 1.1407, 0.8700],
                               atol=1e-4)
    np.testing.assert_allclose(psi_bar_zero(y, 1.0, 0.0), [1.3060, 1.0964, 0.7369], atol=1e-4)


@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0))
def test_zero_delta_weight_decreasing_in_radius(r1, r2):
    lo, hi = sorted((r1, r2))
    if hi - lo > 1e-6:
        assert psi_bar_zero(lo, 1.0, 0.0) > psi_bar_zero(hi, 1.0, 0.0)


def test_closed_form_stable_in_order():
    assert eta_closed(1.0, 0.0, 96) == pytest.approx(eta_closed(1.0, 0.0, 192), rel=1e-9)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        phi_bar(1.5, 0.0, 0.25)
    with pytest.raises(ValueError):
        phi_bar(1.0, 0.0, 0.0)
