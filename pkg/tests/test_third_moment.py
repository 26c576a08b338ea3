import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from shapely.geometry import Point

from shflab.quadrature import TimeChain
from shflab.third_moment import (TestFunctionSpec, brute_gm, gm_eval, gm_reduce, head_rel_error,
                                 lens_area, scrG, scrG_tilde, triple_disk_area)


def random_chain(rng, m):
    return np.sort(rng.uniform(0.0, 1.0, 2 * m))


@pytest.mark.parametrize("m", [2, 3, 4, 5, 6])
def test_reduction_matches_brute_force(m):
    rng = np.random.default_rng(m)
    for _ in range(5):
        chain = random_chain(rng, m)
        z = math.sqrt(chain[0]) * rng.standard_normal((3, 2))
        assert gm_eval(chain, *z) == pytest.approx(brute_gm(chain, *z), rel=1e-10)


def test_reduction_accepts_time_chain():
    times = [0.1, 0.2, 0.3, 0.45, 0.5, 0.7]
    z = np.zeros((3, 2))
    assert gm_eval(TimeChain(1.0, times), *z) == gm_eval(times, *z)


@given(st.integers(2, 6), st.integers(0, 10 ** 6))
def test_reduced_times_positive_with_nonnegative_slack(m, seed):
    chain = random_chain(np.random.default_rng(seed), m)
    if np.any(np.diff(chain) <= 0):
        return
    red = gm_reduce(chain)
    assert red.bar_a2 > 0 and all(g > 0 for g in red.bar_gaps)
    assert red.slack_a2 >= -1e-12
    assert all(s >= -1e-12 for s in red.slack_gaps)
    assert isinstance(red.slack_a2, float)


def test_chain_validation():
    with pytest.raises(ValueError):
        gm_reduce([0.1, 0.2])
    with pytest.raises(ValueError):
        gm_reduce([0.3, 0.2, 0.4, 0.5])


def test_heat_heads_unit_values():
    phi = TestFunctionSpec("heat", 1.0)
    assert float(scrG(1.0, 1.0, phi)) == pytest.approx(2 / 15, rel=1e-15)
    assert float(scrG_tilde(1.0, 1.0, phi)) == pytest.approx(0.125, rel=1e-15)


@given(st.floats(1e-4, 1e2), st.floats(1e-4, 1e2), st.floats(1e-3, 1e2))
def test_heat_head_gap_positive(a1, a2, r):
    phi = TestFunctionSpec("heat", r)
    assert float(scrG(a1, a2, phi)) > float(scrG_tilde(a1, a2, phi))


def _ball_head_mc(a1, a2, r, tilde, n=400000, seed=1):
    rng = np.random.default_rng(seed)
    rad = r * np.sqrt(rng.random((n, 3)))
    ang = 2 * np.pi * rng.random((n, 3))
    z = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
    d1 = z[:, 1] - z[:, 0]
    d2 = z[:, 2] - (z[:, 1] if tilde else 0.5 * (z[:, 0] + z[:, 1]))
    g = lambda s, d: np.exp(-np.sum(d * d, -1) / (2 * s)) / (2 * np.pi * s)
    vals = (2 * np.pi) ** 2 * (np.pi * r * r) ** 3 * g(a1, d1) * g(a2, d2)
    return vals.mean(), vals.std() / math.sqrt(n)


@pytest.mark.parametrize("a1,a2,tilde", [(0.3, 0.5, False), (0.3, 0.5, True), (2.0, 1.0, False)])
def test_ball_heads_against_sampling(a1, a2, tilde):
    phi = TestFunctionSpec("ball", 0.5)
    fn = scrG_tilde if tilde else scrG
    mean, se = _ball_head_mc(a1, a2, 0.5, tilde)
    tol = 4 * se + head_rel_error(phi) * mean
    assert abs(float(fn(a1, a2, phi)) - mean) < tol


def test_lens_area_limits():
    assert float(lens_area(0.0)) == pytest.approx(math.pi)
    assert float(lens_area(2.0)) == pytest.approx(0.0, abs=1e-15)


@given(st.lists(st.tuples(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5)), min_size=3, max_size=3))
def test_triple_area_against_polygon_clipping(centres):
    c = np.array(centres)
    disks = [Point(x, y).buffer(1.0, quad_segs=512) for x, y in c]
    ref = disks[0].intersection(disks[1]).intersection(disks[2]).area
    assert float(triple_disk_area(c)) == pytest.approx(ref, abs=2e-4)


def test_triple_area_coincident_disks():
    assert float(triple_disk_area(np.zeros((3, 2)))) == pytest.approx(math.pi)
    two = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]])
    assert float(triple_disk_area(two)) == pytest.approx(float(lens_area(1.0)))


def test_test_function_parsing():
    phi = TestFunctionSpec.parse("ball:0.5")
    assert phi.kind == "ball" and phi.r == 0.5 and str(phi) == "ball:0.5"
    for bad in ("heat", "cube:1", "heat:-1"):
        with pytest.raises(ValueError):
            TestFunctionSpec.parse(bad)
