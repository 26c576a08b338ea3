import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.lattice_renewal import (ALPHA, GaussianMollifier, constant_C, continuum_overlap_Reps,
                                    discrete_renewal_UN, lattice_window, parse_mollifier,
                                    q2n_zero, renewal_sequence, replica_overlap_RN,
                                    rn_asymptotic_gap, sigma2_from_window)


def test_return_probabilities_small_n():
    # P(S_2 = 0) = 4/16, P(S_4 = 0) = 36/256 for the planar walk
    assert q2n_zero(1) == pytest.approx(0.25)
    assert q2n_zero(2) == pytest.approx(36 / 256)
    with pytest.raises(ValueError):
        q2n_zero(0)


def test_return_probabilities_asymptotics():
    n = 10 ** 6
    assert q2n_zero(n) * math.pi * n == pytest.approx(1.0, rel=1e-6)


def test_overlap_is_partial_sum():
    assert replica_overlap_RN(3) == pytest.approx(sum(q2n_zero(k) for k in (1, 2, 3)))


def test_overlap_gap_shrinks():
    gaps = [abs(rn_asymptotic_gap(10 ** k)) for k in (3, 4, 5, 6)]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.02


def test_window_fields():
    w = lattice_window(4096, 1.0)
    assert w.R_N == pytest.approx(replica_overlap_RN(4096))
    assert w.sigma2_N == pytest.approx(sigma2_from_window(4096, 1.0))


def naive_renewal(n, s2):
    q = s2 * np.array([q2n_zero(k) for k in range(1, n + 1)])
    u = np.zeros(n + 1)
    u[0] = 1.0
    for k in range(1, n + 1):
        u[k] = sum(q[j - 1] * u[k - j] for j in range(1, k + 1))
    return u[1:]


@given(st.integers(1, 60), st.floats(0.01, 2.0))
def test_renewal_recursion_matches_naive(n, s2):
    np.testing.assert_allclose(renewal_sequence(n, s2), naive_renewal(n, s2), rtol=1e-12)


def test_renewal_at_window():
    np.testing.assert_allclose(discrete_renewal_UN(50, 0.5),
                               renewal_sequence(50, sigma2_from_window(50, 0.5)))


@pytest.mark.parametrize("eps", [0.3, 1e-2, 1e-4])
def test_gaussian_overlap_closed_form_vs_quadrature(eps):
    mol = GaussianMollifier(0.5)
    c = continuum_overlap_Reps(eps, mol, "closed")
    q = continuum_overlap_Reps(eps, mol, "quadrature")
    assert q == pytest.approx(c, abs=1e-8)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 0.2])
def test_constant_for_gaussian_mollifier(sigma):
    # X ~ N(0, 4 sigma^2 I) gives E log|X| = (log(8 sigma^2) - gamma) / 2, so the
    # constant collapses to log(1 / (2 sigma^2))
    assert constant_C(GaussianMollifier(sigma)) == pytest.approx(math.log(0.5 / sigma ** 2),
                                                                 abs=1e-10)


def test_parse_mollifier():
    assert parse_mollifier("gaussian:0.25").sigma == 0.25
    with pytest.raises(ValueError):
        parse_mollifier("box:1")


def test_alpha_value():
    assert ALPHA == pytest.approx(np.euler_gamma + math.log(16) - math.pi)
