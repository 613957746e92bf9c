import json
import math
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epshc.schedule import Params, build_geometry
from epshc.space import (
    ONE,
    DyadicScalar,
    ExponentOverflow,
    HVector,
    ZVector,
    dyadic_mul,
    numeric,
    project_block,
    project_plane,
    z_norm,
    z_sub,
)

exponents = st.builds(
    DyadicScalar, st.integers(-400, 400), st.integers(1, 24)
)


def test_lowest_terms():
    assert DyadicScalar(4, 6) == DyadicScalar(2, 3)
    assert (DyadicScalar(0, 7).num, DyadicScalar(0, 7).den) == (0, 1)
    assert (DyadicScalar(-6, 4).num, DyadicScalar(-6, 4).den) == (-3, 2)
    with pytest.raises(ValueError):
        DyadicScalar(1, 0)


def test_numeric_examples():
    assert numeric(DyadicScalar(0, 1)) == 1.0
    assert numeric(DyadicScalar(3, 1)) == 8.0
    assert numeric(DyadicScalar(-1, 1)) == 0.5


@pytest.mark.parametrize("num,den", [(1, 2), (5, 12), (-7, 6), (19, 12), (123, 7)])
def test_numeric_against_mpmath(num, den):
    with mpmath.workdps(40):
        want = mpmath.power(2, mpmath.mpf(num) / den)
        assert abs(numeric(DyadicScalar(num, den)) - float(want)) <= 1e-15 * float(want)


def test_numeric_cap():
    numeric(DyadicScalar(500, 1))
    with pytest.raises(ExponentOverflow):
        numeric(DyadicScalar(501, 1))
    with pytest.raises(ExponentOverflow):
        numeric(DyadicScalar(-1003, 2))


@pytest.mark.parametrize(
    "a,b,want",
    [((1, 1), (-1, 1), (0, 1)), ((1, 2), (1, 2), (1, 1)), ((3, 4), (5, 6), (19, 12))],
)
def test_dyadic_mul_examples(a, b, want):
    got = dyadic_mul(DyadicScalar(*a), DyadicScalar(*b))
    assert (got.num, got.den) == want


@given(exponents, exponents, exponents)
def test_dyadic_mul_group_laws(a, b, c):
    assert a * b == b * a
    assert (a * b) * c == a * (b * c)
    assert a * a.inverse() == ONE
    assert (a * b).exponent == a.exponent + b.exponent


def test_z_norm_examples():
    assert z_norm(ZVector()) == 0
    assert z_norm(ZVector.single(0, HVector.from_values({0: 3.0}))) == 3.0
    u = ZVector({0: HVector.from_values({0: 3.0}), 2: HVector.from_values({5: 4.0})})
    assert z_norm(u) == 5.0


def test_norm_uses_scales():
    h = HVector({1: (3.0, DyadicScalar(1, 1)), 2: (1.0, DyadicScalar(3, 1))})
    assert h.norm() == 10.0
    # huge and tiny scales in the same vector
    big = HVector({0: (1.0, DyadicScalar(400, 1)), 1: (1.0, DyadicScalar(-400, 1))})
    assert big.norm() == 2.0**400


def _random_z(rng, n=12, positions=6, dim=8, fractional=True):
    entries = {}
    for _ in range(n):
        r, j = int(rng.integers(positions)), int(rng.integers(dim))
        s = DyadicScalar(int(rng.integers(-6, 7)), int(rng.integers(1, 4)) if fractional else 1)
        entries[(r, j)] = (float(rng.normal()), s)
    return ZVector.from_entries((r, j, m, s) for (r, j), (m, s) in entries.items())


def _dense(u, positions=6, dim=8):
    a = np.zeros((positions, dim))
    for r, j, m, s in u.entries():
        a[r, j] = m * numeric(s)
    return a


def test_z_sub_against_dense():
    rng = np.random.default_rng(1)
    for _ in range(200):
        u, v = _random_z(rng), _random_z(rng)
        want = np.linalg.norm(_dense(u) - _dense(v))
        got = z_sub(u, v).norm()
        assert got == pytest.approx(want, rel=1e-12, abs=1e-300)


def test_z_sub_exact_cancellation():
    rng = np.random.default_rng(2)
    u = _random_z(rng)
    assert z_sub(u, u) == ZVector()
    assert not z_sub(u, u).coords
    assert z_sub(u, ZVector()) == u
    # same value written on different integer-gap scales also cancels
    a = ZVector.single(0, HVector({3: (1.5, DyadicScalar(2, 1))}))
    b = ZVector.single(0, HVector({3: (6.0, ONE)}))
    assert z_sub(a, b) == ZVector()


def test_entries_reject_zero_and_negative():
    with pytest.raises(ValueError):
        HVector({0: (0.0, ONE)})
    with pytest.raises(ValueError):
        HVector({-1: (1.0, ONE)})
    with pytest.raises(ValueError):
        ZVector({0: HVector()})
    with pytest.raises(ValueError):
        ZVector.from_entries([(0, 1, 1.0, ONE), (0, 1, 2.0, ONE)])


def test_json_round_trip_is_lossless():
    rng = np.random.default_rng(3)
    u = _random_z(rng)
    text = u.to_json()
    assert ZVector.from_json(text) == u
    for rec in json.loads(text):
        assert len(rec) == 5


@pytest.fixture(scope="module")
def geometries():
    return {mode: build_geometry(Params(block_mode=mode)) for mode in ("nested", "disjoint")}


def test_projection_examples(geometries):
    g = geometries["nested"]
    e0 = ZVector.single(4, HVector.from_values({0: 2.0}))
    for k in (1, 2):
        assert project_block(e0, k, g, "P") == e0
        assert project_block(e0, k, g, "Q") == ZVector()
    inside = ZVector.single(0, HVector.from_values({1: 1.0, 4: -2.0}))
    assert project_block(inside, 1, g, "Q") == ZVector()
    with pytest.raises(KeyError):
        project_block(inside, 3, g)
    with pytest.raises(ValueError):
        project_block(inside, 1, g, "X")


def test_disjoint_mode_drops_earlier_blocks(geometries):
    g = geometries["disjoint"]
    u = ZVector.single(0, HVector.from_values({0: 1.0, 2: 1.0, 7: 1.0}))
    assert project_block(u, 2, g, "P") == ZVector.single(0, HVector.from_values({0: 1.0, 7: 1.0}))


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["nested", "disjoint"]), st.sampled_from([1, 2]))
def test_projection_pythagoras(seed, mode, k):
    g = build_geometry(Params(block_mode=mode))
    u = _random_z(np.random.default_rng(seed), dim=20)
    p, q = project_block(u, k, g, "P"), project_block(u, k, g, "Q")
    assert p.norm_sq() + q.norm_sq() == pytest.approx(u.norm_sq(), rel=1e-12)
    assert set(p.entries()) | set(q.entries()) == set(u.entries())


def test_project_plane(geometries):
    g = geometries["nested"]
    m2 = g.block(2).m
    assert project_plane(HVector.from_values({0: 1.0}), 2, g) == (1.0, 0.0)
    assert project_plane(HVector.from_values({m2: 5.0}), 2, g) == (0.0, 5.0)
    assert project_plane(HVector.from_values({3: 5.0}), 2, g) == (0.0, 0.0)


def test_fraction_exponent_view():
    s = DyadicScalar.from_exponent(Fraction(-9, 12))
    assert (s.num, s.den) == (-3, 4)
    assert float(s) == pytest.approx(2 ** -0.75, rel=1e-15)
    assert math.isclose(numeric(DyadicScalar(7, 3)) * numeric(DyadicScalar(-7, 3)), 1.0)
