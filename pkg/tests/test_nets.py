import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epshc.nets import (
    GeoGrid,
    NetBudgetExceeded,
    OutOfCoverage,
    SkSet,
    all_points_brute,
    build_sphere_net,
    discretize,
    grid_exponent,
    quantization_bound,
)
from epshc.space import DyadicScalar, HVector


def _unit(rng, dim, n):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_dim_one_net_is_two_points():
    net = build_sphere_net([7], 0.3)
    assert sorted(net.points[:, 0]) == [-1.0, 1.0]


@pytest.mark.parametrize("dim,tau", [(2, 0.5), (2, 0.0625), (3, 0.125), (4, 0.4)])
def test_net_points_unit_symmetric_and_axis(dim, tau):
    net = build_sphere_net(list(range(dim)), tau)
    assert np.allclose(np.linalg.norm(net.points, axis=1), 1.0, atol=1e-12)
    rows = {tuple(p) for p in net.points}
    assert all(tuple(-p) in rows for p in net.points)
    for i in range(dim):
        axis = np.zeros(dim)
        axis[i] = 1.0
        assert tuple(axis) in rows
    assert net.h * math.sqrt(dim) <= tau / 2


@pytest.mark.parametrize("dim,tau", [(2, 0.5), (3, 0.125)])
def test_net_covering_sampled(dim, tau):
    net = build_sphere_net(list(range(dim)), tau)
    v = _unit(np.random.default_rng(dim), dim, 100_000)
    d, _ = net.tree.query(v)
    assert d.max() <= tau


def test_nearest_matches_exhaustive_search():
    net = build_sphere_net([1, 3], 0.0625)
    rng = np.random.default_rng(5)
    for v in _unit(rng, 2, 2000):
        i, j = net.nearest(v), all_points_brute(net, v)
        # ties can pick different indices, but never a farther point
        assert np.linalg.norm(net.points[i] - v) <= np.linalg.norm(net.points[j] - v) + 1e-15


def test_net_budget_and_bounds():
    with pytest.raises(NetBudgetExceeded) as err:
        build_sphere_net([0, 1, 2, 3], 0.01, budget=1000)
    assert err.value.size > 1000
    with pytest.raises(ValueError):
        build_sphere_net([], 0.1)
    with pytest.raises(ValueError):
        build_sphere_net(list(range(5)), 0.1)
    with pytest.raises(ValueError):
        build_sphere_net([0], 1.5)


def test_geo_grid():
    g = GeoGrid(6, 2)
    assert len(g) == len(g.values) == 2 * 6 * 2 + 1
    vals = set(g.values)
    assert all(v.inverse() in vals for v in vals)
    assert g.value(-12) == DyadicScalar(-2, 1)
    with pytest.raises(IndexError):
        g.value(13)


def test_discretize_exact_member():
    net = build_sphere_net([4, 5], 0.125)
    grid = GeoGrid(12, 3)
    u0 = 17
    w = 2.0 * net.points[u0]
    point, m = discretize(w, net, grid)
    assert (point, m) == (u0, 12)
    sk = SkSet(net, grid)
    assert np.linalg.norm(sk.dense(point, m) - w) == 0.0


def test_discretize_three_in_dim_one():
    net = build_sphere_net([0], 0.2)
    grid = GeoGrid(2, 2)
    point, m = discretize(np.array([3.0]), net, grid)
    assert m == math.floor(2 * math.log2(3) + 0.5) == 3
    alpha = 2 ** (3 / 2)
    assert abs(alpha - 3) <= (2 ** 0.25 - 1) * 3
    assert net.points[point][0] == 1.0


def test_discretize_hvector_input():
    net = build_sphere_net([2, 6], 0.125)
    grid = GeoGrid(12, 2)
    w = HVector.from_values({2: 0.3, 6: -0.4})
    assert discretize(w, net, grid) == discretize(np.array([0.3, -0.4]), net, grid)
    with pytest.raises(ValueError):
        discretize(HVector.from_values({3: 1.0}), net, grid)
    with pytest.raises(ValueError):
        discretize(np.zeros(2), net, grid)


def test_grid_clamp_and_coverage():
    grid = GeoGrid(4, 1)
    assert grid_exponent(2.0 ** 1.2, grid) == 4  # within one step: clamped
    with pytest.raises(OutOfCoverage):
        grid_exponent(2.0 ** 1.5, grid)
    with pytest.raises(OutOfCoverage):
        grid_exponent(2.0 ** -1.5, grid)


@settings(max_examples=300)
@given(
    st.sampled_from([(1, 0.25), (2, 0.125), (3, 0.0625), (2, 0.0625)]),
    st.integers(0, 2**32 - 1),
    st.floats(-2.0, 2.0),
)
def test_discretize_bounds(case, seed, log_norm):
    dim, tau = case
    J = max(1, math.ceil(1 / (2 * math.log2(1 + tau))))
    net = build_sphere_net(list(range(dim)), tau)
    grid = GeoGrid(J, 2)
    rng = np.random.default_rng(seed)
    w = _unit(rng, dim, 1)[0] * 2.0**log_norm
    point, m = discretize(w, net, grid)
    nw = np.linalg.norm(w)
    alpha = 2.0 ** (m / J)
    assert np.linalg.norm(w - alpha * net.points[point]) <= 2 * tau * nw
    assert abs(alpha / nw - 1) <= quantization_bound(J) * (1 + 1e-12)
    assert quantization_bound(J) <= tau


def test_certificate_fields():
    net = build_sphere_net([1, 2, 3], 0.125)
    cert = net.certificate()
    assert cert["dim"] == 3 and cert["tau"] == 0.125 and cert["points"] == len(net)
    assert cert["indices"] == [1, 2, 3]
