"""Sparse vectors in H = l2(N) and Z = l2(N; H).

Every stored coefficient is split as ``mantissa * 2**(p/q)``.  Weighted-shift
multipliers are pure powers of two, so they only ever touch the exponent and
orbit states can be compared exactly.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Iterable, Iterator, Mapping

import numpy as np

EXPONENT_CAP = 500


class ExponentOverflow(ArithmeticError):
    """Raised when a dyadic exponent is too large to convert to a float."""


@dataclass(frozen=True, order=True)
class DyadicScalar:
    """The positive real ``2**(num/den)``, stored in lowest terms."""

    num: int = 0
    den: int = 1

    def __post_init__(self):
        if self.den < 1:
            raise ValueError(f"denominator must be positive, got {self.den}")
        g = math.gcd(self.num, self.den)
        if g != 1:
            object.__setattr__(self, "num", self.num // g)
            object.__setattr__(self, "den", self.den // g)

    @classmethod
    def from_exponent(cls, e: Fraction | int) -> "DyadicScalar":
        e = Fraction(e)
        return cls(e.numerator, e.denominator)

    @property
    def exponent(self) -> Fraction:
        return Fraction(self.num, self.den)

    def __mul__(self, other: "DyadicScalar") -> "DyadicScalar":
        if not isinstance(other, DyadicScalar):
            return NotImplemented
        return dyadic_mul(self, other)

    def inverse(self) -> "DyadicScalar":
        return DyadicScalar(-self.num, self.den)

    def __truediv__(self, other: "DyadicScalar") -> "DyadicScalar":
        return self * other.inverse()

    def is_one(self) -> bool:
        return self.num == 0

    def __float__(self) -> float:
        return numeric(self)

    def __repr__(self) -> str:
        if self.den == 1:
            return f"2^{self.num}"
        return f"2^({self.num}/{self.den})"


ONE = DyadicScalar(0, 1)


def dyadic_mul(a: DyadicScalar, b: DyadicScalar) -> DyadicScalar:
    if a.num == 0:
        return b
    if b.num == 0:
        return a
    if a.den == b.den:
        return DyadicScalar(a.num + b.num, a.den)
    return DyadicScalar(a.num * b.den + b.num * a.den, a.den * b.den)


def numeric(s: DyadicScalar, cap: int = EXPONENT_CAP) -> float:
    """Float value of ``s``; exact whenever the exponent is an integer."""
    e = s.exponent
    if abs(e) > cap:
        raise ExponentOverflow(f"exponent {e} exceeds cap {cap}")
    whole = math.floor(e)
    frac = e - whole
    if frac == 0:
        return math.ldexp(1.0, whole)
    return math.ldexp(2.0 ** float(frac), whole)


@dataclass(frozen=True)
class HVector:
    """Finitely supported vector of H; maps internal index j to (mantissa, scale)."""

    entries: Mapping[int, tuple[float, DyadicScalar]] = field(default_factory=dict)

    def __post_init__(self):
        for j, (m, _) in self.entries.items():
            if j < 0:
                raise ValueError(f"negative internal index {j}")
            if m == 0:
                raise ValueError(f"zero mantissa stored at index {j}")

    @classmethod
    def from_values(cls, values: Mapping[int, float]) -> "HVector":
        return cls({int(j): (float(v), ONE) for j, v in values.items() if v != 0})

    def __bool__(self) -> bool:
        return bool(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def value(self, j: int) -> float:
        if j not in self.entries:
            return 0.0
        m, s = self.entries[j]
        return m * numeric(s)

    def values(self) -> dict[int, float]:
        return {j: m * numeric(s) for j, (m, s) in self.entries.items()}

    def norm_sq(self) -> float:
        return _scaled_norm_sq(self.entries.values())

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def restrict(self, keep) -> "HVector":
        """Keep the indices for which ``keep(j)`` is true."""
        return HVector({j: e for j, e in self.entries.items() if keep(j)})

    def scaled(self, factor: DyadicScalar) -> "HVector":
        if factor.is_one():
            return self
        return HVector({j: (m, s * factor) for j, (m, s) in self.entries.items()})


def _scaled_norm_sq(items: Iterable[tuple[float, DyadicScalar]]) -> float:
    # Rescale by the largest exponent so tiny and huge scales mix without overflow.
    items = list(items)
    if not items:
        return 0.0
    top = max(math.floor(s.exponent) for _, s in items)
    acc = 0.0
    for m, s in items:
        rel = s.exponent - top
        if rel < -1100:
            continue
        whole = math.floor(rel)
        v = math.ldexp(m * 2.0 ** float(rel - whole), whole)
        acc += v * v
    if acc == 0.0:
        return 0.0
    # acc * 4**top, guarding the float range explicitly
    mant, ex = math.frexp(acc)
    total_exp = ex + 2 * top
    if total_exp > 2 * EXPONENT_CAP:
        raise ExponentOverflow(f"norm^2 exponent {total_exp} exceeds cap")
    return math.ldexp(mant, total_exp)


@dataclass(frozen=True)
class ZVector:
    """Finitely supported element of Z: position r -> nonzero HVector."""

    coords: Mapping[int, HVector] = field(default_factory=dict)

    def __post_init__(self):
        for r, v in self.coords.items():
            if r < 0:
                raise ValueError(f"negative position {r}")
            if not v:
                raise ValueError(f"empty HVector stored at position {r}")

    @classmethod
    def from_entries(cls, entries: Iterable[tuple[int, int, float, DyadicScalar]]) -> "ZVector":
        coords: dict[int, dict[int, tuple[float, DyadicScalar]]] = {}
        for r, j, m, s in entries:
            if m == 0:
                continue
            row = coords.setdefault(r, {})
            if j in row:
                raise ValueError(f"duplicate entry at ({r}, {j})")
            row[j] = (float(m), s)
        return cls({r: HVector(row) for r, row in coords.items()})

    @classmethod
    def single(cls, r: int, v: HVector) -> "ZVector":
        return cls({r: v} if v else {})

    def __bool__(self) -> bool:
        return bool(self.coords)

    def __getitem__(self, r: int) -> HVector:
        return self.coords.get(r, _EMPTY_H)

    @cached_property
    def positions(self) -> list[int]:
        return sorted(self.coords)

    @cached_property
    def flat(self):
        """Arrays (position, index, mantissa, float exponent) in entry order."""
        rows = list(self.entries())
        pos = np.array([e[0] for e in rows], dtype=np.int64)
        idx = np.array([e[1] for e in rows], dtype=np.int64)
        mant = np.array([e[2] for e in rows], dtype=float)
        expo = np.array([e[3].num / e[3].den for e in rows], dtype=float)
        return pos, idx, mant, expo

    def entries(self) -> Iterator[tuple[int, int, float, DyadicScalar]]:
        for r in self.positions:
            row = self.coords[r]
            for j in sorted(row.entries):
                m, s = row.entries[j]
                yield r, j, m, s

    def nnz(self) -> int:
        return sum(len(v) for v in self.coords.values())

    def norm_sq(self) -> float:
        return _scaled_norm_sq((m, s) for _, _, m, s in self.entries())

    def norm(self) -> float:
        return math.sqrt(self.norm_sq())

    def map_coords(self, fn) -> "ZVector":
        out = {}
        for r, v in self.coords.items():
            w = fn(r, v)
            if w:
                out[r] = w
        return ZVector(out)

    def restrict_positions(self, keep) -> "ZVector":
        return ZVector({r: v for r, v in self.coords.items() if keep(r)})

    def to_json(self) -> str:
        return json.dumps(zvector_records(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ZVector":
        return zvector_from_records(json.loads(text))


_EMPTY_H = HVector({})


def zvector_records(u: ZVector) -> list[list]:
    """Flat ``[r, j, mantissa, exp_num, exp_den]`` records, sorted by (r, j)."""
    return [[r, j, m, s.num, s.den] for r, j, m, s in u.entries()]


def zvector_from_records(records) -> ZVector:
    return ZVector.from_entries(
        (int(r), int(j), float(m), DyadicScalar(int(p), int(q))) for r, j, m, p, q in records
    )


def z_norm(u: ZVector) -> float:
    return u.norm()


def _sub_entry(a: tuple[float, DyadicScalar], b: tuple[float, DyadicScalar]):
    (ma, sa), (mb, sb) = a, b
    if sa == sb:
        return (ma - mb, sa)
    # express b on a's scale; exact when the exponent gap is an integer
    gap = sb.exponent - sa.exponent
    if gap.denominator == 1 and abs(gap) < 1000:
        return (ma - math.ldexp(mb, int(gap)), sa)
    return (ma - mb * 2.0 ** float(gap), sa)


def h_sub(u: HVector, v: HVector) -> HVector:
    out = dict(u.entries)
    for j, (m, s) in v.entries.items():
        if j in out:
            diff = _sub_entry(out[j], (m, s))
            if diff[0] == 0:
                del out[j]
            else:
                out[j] = diff
        else:
            out[j] = (-m, s)
    return HVector(out)


def z_sub(u: ZVector, v: ZVector) -> ZVector:
    out = dict(u.coords)
    for r, w in v.coords.items():
        d = h_sub(out[r], w) if r in out else HVector({j: (-m, s) for j, (m, s) in w.entries.items()})
        if d:
            out[r] = d
        else:
            out.pop(r, None)
    return ZVector(out)


def project_block(u: ZVector, k: int, g, which: str = "P") -> ZVector:
    """Apply P_k (``which="P"``) or Q_k (``which="Q"``) at every position."""
    if which not in ("P", "Q"):
        raise ValueError(f"which must be 'P' or 'Q', got {which!r}")
    inside = g.f_membership(k)
    if which == "P":
        return u.map_coords(lambda r, v: v.restrict(inside))
    return u.map_coords(lambda r, v: v.restrict(lambda j: not inside(j)))


def project_plane(v: HVector, k: int, g) -> tuple[float, float]:
    """Coefficients of e_0 and e_{m_k}."""
    m_k = g.block(k).m
    return v.value(0), v.value(m_k)
