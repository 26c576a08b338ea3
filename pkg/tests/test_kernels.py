import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.eta_bound import phi_bar
from shflab.kernels import (K2, K2_covariance_full, K3_gmc, TRANSFER_RTOL,
                            count_label_sequences, grid_error, k2_second_moment, k2_table,
                            k_gmc, label_sequence_weights, prod2_series)
from shflab.quadrature import QuadSpec
from shflab.special_fn import heat_kernel_r2

# 2 pi int_0^t g_s(r) Gbar(t - s) ds evaluated entirely in mpmath at 20 digits
K2_ORACLE = [(1.0, 0.0, 0.3, 2.3734462823537), (1.0, 0.0, 1.0, 0.378321493255968),
             (0.5, 2.0, 0.5, 2.90007744635503)]


@pytest.mark.parametrize("t,theta,r,value", K2_ORACLE)
def test_k2_matches_high_precision(t, theta, r, value):
    assert K2(t, theta, r) == pytest.approx(value, rel=1e-10)


def test_k2_edge_cases():
    assert K2(1.0, 0.0, 0.0) == math.inf
    assert K2(1.0, 0.0, 200.0) == 0.0
    with pytest.raises(ValueError):
        K2(1.0, 0.0, -1.0)
    with pytest.raises(ValueError):
        K2(1.5, 0.0, 1.0)


def test_k_gmc_is_log1p():
    assert k_gmc(1.0, 0.0, 0.5) == pytest.approx(math.log1p(K2(1.0, 0.0, 0.5)))


def test_table_against_direct_quadrature():
    tab = k2_table(1.0, 0.0)
    rng = np.random.default_rng(3)
    r = np.exp(rng.uniform(math.log(1e-6), math.log(10.0), 100))
    direct = np.array([K2(1.0, 0.0, x) for x in r])
    np.testing.assert_allclose(tab(r), direct, rtol=1e-6, atol=1e-9)


@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_k2_decreasing_in_distance(r1, r2):
    lo, hi = sorted((r1, r2))
    if hi - lo > 1e-6:
        assert K2(1.0, 0.0, lo) > K2(1.0, 0.0, hi)


def test_second_moment_two_routes():
    assert k2_second_moment(1.0, 0.0, 0.25) == pytest.approx(phi_bar(1.0, 0.0, 0.25), abs=1e-9)


def test_k3_gmc_expands_product():
    ks = [K2(1.0, 0.0, r) for r in (0.3, 0.4, 0.5)]
    expect = (1 + ks[0]) * (1 + ks[1]) * (1 + ks[2]) - 1 - sum(ks)
    assert K3_gmc(1.0, 0.0, 0.3, 0.4, 0.5) == pytest.approx(expect)


@pytest.mark.parametrize("n,m", [(2, 3), (3, 3), (3, 5), (4, 4)])
def test_label_sequence_counts(n, m):
    import itertools
    seqs = [s for s in itertools.product(range(n), repeat=m)
            if all(x != y for x, y in zip(s, s[1:]))]
    assert count_label_sequences(n, m, False) == len(seqs)
    assert count_label_sequences(n, m, True) == sum(len(set(s)) == n for s in seqs)


def test_label_weights_symmetric():
    rng = np.random.default_rng(0)
    t = np.sort(rng.random((5, 6)), axis=1)
    a, b = t[:, 0::2], t[:, 1::2]
    np.testing.assert_allclose(label_sequence_weights(a, b, (0.3, 0.7)),
                               label_sequence_weights(a, b, (0.7, 0.3)))


def test_prod2_partial_sums_increase():
    spec = QuadSpec(mc_samples=1 << 12)
    short = prod2_series(1.0, 0.0, 0.3, 0.3, m_max=2, spec=spec)
    longer = prod2_series(1.0, 0.0, 0.3, 0.3, m_max=4, spec=spec, rel_tol=1e-12)
    assert short.value < longer.value
    assert longer.terms[0] == short.terms[0]


def test_grid_error_model():
    # exact order-2 convergence at ratio 1.5: d1 / d2 = 2.25
    sums = [1.0, 1.0 + 2.25e-3, 1.0 + 2.25e-3 + 1e-3]
    err = grid_error(sums, 1.5)
    assert err == pytest.approx(1.25 * 1e-3 / 1.25)
    # non-monotone differences fall back to their sum
    assert grid_error([1.0, 1.1, 1.0], 1.5) == pytest.approx(0.2)
    assert TRANSFER_RTOL > 0


@pytest.mark.slow
def test_covariance_kernel_marginal_is_half_k2():
    # mid-point factor integrates to pi; the remaining radial integral in |y' - y|
    t, theta, r = 1.0, 0.0, 0.5
    x, xp = np.zeros(2), np.array([r, 0.0])
    c = 0.5 * (x + xp)
    g0 = heat_kernel_r2(t / 4.0, 0.0)
    xg, wg = np.polynomial.legendre.leggauss(12)
    edges = np.linspace(math.log(1e-4), math.log(10.0), 7)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        for xi, wi in zip(xg, wg):
            rho = math.exp(a + 0.5 * (b - a) * (xi + 1.0))
            d = np.array([rho, 0.0])
            k = K2_covariance_full(t, theta, x, xp, c - 0.5 * d, c + 0.5 * d)
            total += 0.5 * (b - a) * wi * 2.0 * math.pi * rho * rho * k / g0
    assert total == pytest.approx(0.5 * K2(t, theta, r), rel=1e-4)
