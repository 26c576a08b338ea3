import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shflab.quadrature import QuadSpec, rng_stream
from shflab.simulate import (collision_counts, even_time, gci_ratio_mc, polymer_replica_moment,
                             polymer_transfer_matrix, round_to_even_sites, she_beta2,
                             she_replica_moment, start_distribution, transfer_moments,
                             window_beta2)
from shflab.lattice_renewal import sigma2_from_window

# exact finite-N values of E[(2 Z_N(g_delta))^2] at theta = 0, delta = 0.25 with
# e^{beta^2} - 1 = sigma_N^2: a sum over first-collision times of squared
# binomial start-difference probabilities times the renewal tail (independent script)
EXACT_SECOND = {64: 1.9143288226309187, 1024: 1.9270416196793325}


def test_even_time():
    assert even_time(5.0) == 4 or even_time(5.0) == 6
    assert even_time(64.2) == 64


@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_rounding_lands_on_even_sublattice_nearby(x, y):
    s = round_to_even_sites(np.array([[x, y]]))[0]
    assert (s[0] + s[1]) % 2 == 0
    # Voronoi cell of the even sublattice: |dx| + |dy| <= 1
    assert abs(s[0] - x) + abs(s[1] - y) <= 1.0 + 1e-9


def test_collision_at_first_step_probability():
    starts = np.zeros((200000, 2, 2), dtype=np.int64)
    counts, first = collision_counts(rng_stream(0), starts, 2)
    assert abs(counts.mean() - 0.25) < 4 * math.sqrt(0.25 * 0.75 / 200000)
    assert np.all((first == 1) == (counts == 1))


def test_first_collision_consistent_with_counts():
    starts = round_to_even_sites(3 * rng_stream(1).standard_normal((500, 3, 2)))
    counts, first = collision_counts(rng_stream(2), starts, 600)
    assert np.all((first > 0) == (counts > 0))
    assert np.all(first < 600)


def test_window_coupling():
    assert math.expm1(window_beta2(4096, 1.0)) == pytest.approx(sigma2_from_window(4096, 1.0))


def test_replica_without_disorder_is_one():
    est = polymer_replica_moment(3, 64, 0.0, 0.25, QuadSpec(mc_samples=1000), beta2=0.0,
                                 method="plain")
    assert est.mean == 1.0


@pytest.mark.parametrize("N", sorted(EXACT_SECOND))
def test_conditional_estimator_matches_exact(N):
    est = polymer_replica_moment(2, N, 0.0, 0.25, QuadSpec(mc_samples=1 << 14), seed=7)
    assert abs(est.mean - EXACT_SECOND[N]) < 4 * est.stderr


def test_plain_and_conditional_agree_at_small_n():
    spec = QuadSpec(mc_samples=1 << 15)
    a = polymer_replica_moment(2, 32, 0.0, 0.25, spec, seed=1, method="plain")
    b = polymer_replica_moment(2, 32, 0.0, 0.25, spec, seed=1, method="conditional")
    assert abs(a.mean - b.mean) < 4 * math.hypot(a.stderr, b.stderr)


def test_conditional_needs_two_replicas():
    with pytest.raises(ValueError):
        polymer_replica_moment(3, 64, 0.0, 0.25, method="conditional")


def test_start_distribution_is_probability_on_even_sites():
    p = start_distribution(64, 0.25, 48)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    z = np.arange(-48, 49)
    odd = (z[:, None] + z[None, :]) % 2 == 1
    assert np.all(p[odd] == 0)


def test_transfer_without_disorder():
    f = polymer_transfer_matrix(64, 0.0, beta2=0.0)
    assert 2 * f.value == pytest.approx(1.0, abs=1e-6)


def test_transfer_field_bytes_deterministic():
    a = polymer_transfer_matrix(32, 0.0, seed=5)
    b = polymer_transfer_matrix(32, 0.0, seed=5)
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != polymer_transfer_matrix(32, 0.0, seed=6).to_bytes()


def test_transfer_moments_consistent():
    first, second = transfer_moments(64, 0.0, 0.25, 200, seed=3)
    assert abs(first.mean - 1.0) < 4 * first.stderr
    assert abs(second.mean - EXACT_SECOND[64]) < 4 * second.stderr


def test_transfer_rejects_small_box():
    with pytest.raises(ValueError):
        polymer_transfer_matrix(64, 0.0, box=10)


def test_she_without_coupling_is_one():
    est = she_replica_moment(3, 1.0, 0.0, 0.1, 0.25, 50, QuadSpec(mc_samples=256), beta2=0.0)
    assert est.estimate.mean == 1.0 and est.step_bias == 0.0


def test_she_coupling_positive_and_eps_range():
    assert she_beta2(0.01, 0.0) > 0
    with pytest.raises(ValueError):
        she_replica_moment(2, 1.0, 0.0, 0.5, 0.25, 10)


def test_gci_ratio_trivial_without_coupling():
    r = gci_ratio_mc(1.0, 0.0, 0.1, 0.25, QuadSpec(mc_samples=256), n_steps=20, beta2=0.0)
    assert r.ratio == pytest.approx(1.0) and r.stderr == pytest.approx(0.0, abs=1e-12)


def test_she_second_moment_plausible():
    est = she_replica_moment(2, 1.0, 0.0, 0.1, 0.25, 100, QuadSpec(mc_samples=4096), seed=1)
    assert est.estimate.mean > 1.0
