import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.eta_bound import phi_bar
from shflab.higher_moments import (ExcessReport, GaussianState, PairingSequence, apply_G, apply_Q,
                                   enumerate_pairings, factorization_constant,
                                   factorization_report, gmc_moment_mc, pairing_count,
                                   shf_moment_mc, shf_moment_series)
from shflab.kernels import k2_second_moment
from shflab.quadrature import QuadSpec
from shflab.special_fn import g_theta, gtheta_table


@pytest.mark.parametrize("h,m", [(2, 1), (2, 3), (3, 1), (3, 4), (4, 3)])
def test_pairing_enumeration_count(h, m):
    seqs = list(enumerate_pairings(h, m))
    assert len(seqs) == pairing_count(h, m)
    assert len(set(s.pairs for s in seqs)) == len(seqs)


def test_pairing_cap():
    with pytest.raises(OverflowError):
        next(enumerate_pairings(5, 9))


def test_pairing_validation():
    with pytest.raises(ValueError):
        PairingSequence(3, ((0, 1), (0, 1)))
    with pytest.raises(ValueError):
        PairingSequence(3, ((1, 0),))


def test_q_step_density_and_pinning():
    s = GaussianState.start([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]], var=0.1)
    out = apply_Q(s, (0, 1), 0.5)
    v = 2 * (0.1 + 0.25)
    assert out.weight == pytest.approx(math.exp(-1 / (2 * v)) / (2 * math.pi * v))
    np.testing.assert_allclose(out.mean[0], out.mean[1])
    e = np.array([1.0, -1.0, 0.0])
    assert abs(e @ out.cov @ e) < 1e-14
    # third point untouched by the conditioning
    np.testing.assert_allclose(out.mean[2], [0.0, 2.0])


def test_g_step_requires_pinned_pair():
    s = GaussianState.start([[0.0, 0.0], [1.0, 0.0]])
    with pytest.raises(ValueError):
        apply_G(s, (0, 1), 0.3)


@given(st.floats(0.01, 0.5), st.floats(0.01, 0.5), st.floats(-2, 2))
def test_g_step_moves_pinned_pair_together(elapsed, gap, theta):
    s = apply_Q(GaussianState.start([[0.0, 0.0], [0.5, 0.0], [0.0, 1.0]], 0.05), (0, 1), elapsed)
    out = apply_G(s, (0, 1), gap, theta)
    e = np.array([1.0, -1.0, 0.0])
    assert abs(e @ out.cov @ e) < 1e-12
    assert out.weight == pytest.approx(s.weight * g_theta(theta, gap))
    # the midpoint gains variance gap / 4 per axis
    mid = np.array([0.5, 0.5, 0.0])
    assert mid @ out.cov @ mid == pytest.approx(mid @ s.cov @ mid + 0.25 * gap)
    assert np.all(np.linalg.eigvalsh(out.cov) > -1e-12)


def test_second_moment_flow_matches_quadrature():
    est = shf_moment_mc(2, 1.0, 0.0, 0.25, spec=QuadSpec(mc_samples=1 << 15), seed=3)
    assert abs(est.mean - phi_bar(1.0, 0.0, 0.25)) < 4 * est.stderr


def test_zero_order_is_one():
    assert shf_moment_mc(3, 1.0, 0.0, 0.25, m_max=0).mean == 1.0


def test_third_moment_first_term_is_three_pairs():
    s = shf_moment_series(3, 1.0, 0.0, 0.25, m_max=1, spec=QuadSpec(mc_samples=1 << 15), seed=2)
    expect = 3 * (phi_bar(1.0, 0.0, 0.25) - 1)
    assert abs(s.terms[0] - expect) < 4 * s.term_errors[0]


def test_gmc_second_moment_matches_kernel_integral():
    est = gmc_moment_mc(2, 1.0, 0.0, 0.25, spec=QuadSpec(mc_samples=1 << 17), seed=4)
    assert abs(est.mean - k2_second_moment(1.0, 0.0, 0.25)) < 4 * est.stderr


def test_gmc_moments_jobs_invariant():
    a = gmc_moment_mc(3, 1.0, 0.0, 0.1, spec=QuadSpec(mc_samples=1 << 15, jobs=1), seed=9)
    b = gmc_moment_mc(3, 1.0, 0.0, 0.1, spec=QuadSpec(mc_samples=1 << 15, jobs=2), seed=9)
    assert a == b


def test_factorization_constant():
    assert factorization_constant(1.0, 0.0) == pytest.approx(2 * float(gtheta_table(0.0).Gbar(1.0)))


def test_factorization_report_h2_trivial():
    rows = factorization_report(2, 1.0, 0.0, [0.1], QuadSpec(mc_samples=4096))
    assert rows[0].ratio == 1.0


def test_excess_status_rules():
    kw = dict(h=3, t=1.0, theta=0.0, delta=0.25, shf=None, second=None)
    assert ExcessReport(excess=1.0, error=0.1, truncated=True, **kw).status == "positive"
    assert ExcessReport(excess=-1.0, error=0.1, truncated=True, **kw).status == "inconclusive"
    assert ExcessReport(excess=-1.0, error=0.1, truncated=False, **kw).status == "negative"
