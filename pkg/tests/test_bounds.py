import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ztree.bounds import Box, PeriodicDomain, d_low, d_up, displacement, distance
from ztree.oracle import pair_distances, sample_bound_check


def test_displacement_examples():
    assert displacement([1.0, 1.0], [0.0, 0.0]).tolist() == [1.0, 1.0]
    assert displacement([0.5], [9.5], 10.0).tolist() == [1.0]
    assert displacement([2.0, 3.0], [2.0, 3.0], [4.0, 0.0]).tolist() == [0.0, 0.0]


@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(0.5, 50))
def test_displacement_in_half_open_range(a, b, p):
    dx = displacement([a], [b], p)[0]
    assert -p / 2 - 1e-9 <= dx < p / 2 + 1e-9
    assert math.isclose(math.remainder(dx - (a - b), p), 0.0, abs_tol=1e-9)


def test_d_low_examples():
    a = Box([0.0, 0.0], [1.0, 1.0])
    b = Box([3.0, 0.0], [1.0, 1.0])
    assert d_low(a, a) == 0.0
    # widened by the rounding margin, never above the exact value
    assert d_low(a, b) == pytest.approx(1.0, rel=1e-13) and d_low(a, b) <= 1.0
    assert d_low(Box([0.5], [0.5]), Box([9.5], [0.5]), 10.0) == 0.0


def test_d_up_examples():
    z = Box([1.0, 2.0], [0.0, 0.0])
    assert d_up(z, z) == 0.0
    a = Box([0.0, 0.0], [1.0, 1.0])
    b = Box([3.0, 0.0], [1.0, 1.0])
    assert d_up(a, b) == pytest.approx(math.sqrt(29), rel=1e-13) and d_up(a, b) >= math.sqrt(29)
    h = 0.25
    c = Box([0.0, 0.0, 0.0], [h, h, h])
    assert d_up(c, c) == pytest.approx(2 * h * math.sqrt(3))


def test_domain_object_equivalent():
    a, b = Box([0.5], [0.25]), Box([9.0], [0.25])
    assert d_low(a, b, PeriodicDomain([10.0])) == d_low(a, b, 10.0)
    assert d_up(a, b, PeriodicDomain.open(1)) == d_up(a, b)


def test_box_rejects_negative_extent():
    with pytest.raises(ValueError):
        Box([0.0], [-1.0])


def test_wide_periodic_box_has_no_lower_bound():
    # extent not below half a period: the conservative fallback claims nothing
    a, b = Box([1.0], [2.6]), Box([6.0], [0.1])
    assert d_low(a, b, 10.0) == 0.0


coord = st.floats(-5, 5)
half = st.floats(0, 2)


@given(st.integers(1, 4), st.data(), st.booleans(), st.integers(0, 10_000))
def test_soundness_sampled(d, data, periodic, seed):
    c1 = np.array([data.draw(coord) for _ in range(d)])
    c2 = np.array([data.draw(coord) for _ in range(d)])
    h1 = np.array([data.draw(half) for _ in range(d)])
    h2 = np.array([data.draw(half) for _ in range(d)])
    box = 7.0 if periodic else None
    lo, hi = sample_bound_check((c1, h1), (c2, h2), box, 100, seed)
    a, b = Box(c1, h1), Box(c2, h2)
    assert d_low(a, b, box) <= lo
    assert hi <= d_up(a, b, box)


@given(st.integers(1, 3), st.data())
def test_symmetry_and_order(d, data):
    a = Box([data.draw(coord) for _ in range(d)], [data.draw(half) for _ in range(d)])
    b = Box([data.draw(coord) for _ in range(d)], [data.draw(half) for _ in range(d)])
    for box in (None, 6.0):
        assert d_low(a, b, box) == d_low(b, a, box)
        assert d_up(a, b, box) == d_up(b, a, box)
        assert d_low(a, b, box) <= d_up(a, b, box)


@given(st.integers(1, 4), st.data())
def test_zero_extent_is_point_distance(d, data):
    p = [data.draw(coord) for _ in range(d)]
    q = [data.draw(coord) for _ in range(d)]
    a, b = Box(p, [0.0] * d), Box(q, [0.0] * d)
    dist = distance(p, q)
    assert d_low(a, b) <= dist <= d_up(a, b)
    assert d_low(a, b) == pytest.approx(dist, rel=1e-13, abs=1e-300)
    assert d_up(a, b) == pytest.approx(dist, rel=1e-13, abs=1e-300)


def test_distance_matches_oracle(rng):
    x = rng.random((50, 3)) * 4
    y = rng.random((40, 3)) * 4
    D = pair_distances(x, y, 3.0)
    mine = np.array([[distance(a, b, 3.0) for b in y] for a in x])
    assert np.array_equal(D, mine)
