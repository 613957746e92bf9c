"""Certified tau-nets on unit spheres and the geometric magnitude grid.

The net is the radial projection of the integer points on the boundary of the
cube [-n, n]^dim, with n = ceil(2 sqrt(dim) / tau).  A unit vector v meets the
cube surface at w = n v / |v|_inf; the nearest boundary lattice point g is
within sqrt(dim)/2 of w and |w| >= n, so |v - g/|g|| <= sqrt(dim)/n <= tau/2.
Interior lattice points add no new directions beyond that bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .space import DyadicScalar, HVector


class NetBudgetExceeded(ValueError):
    def __init__(self, size: int, budget: int):
        self.size = size
        super().__init__(f"net would have {size} points, budget is {budget}")


class OutOfCoverage(ValueError):
    """Magnitude outside the grid range; increase M."""


def _shell_size(n: int, dim: int) -> int:
    return (2 * n + 1) ** dim - (2 * n - 1) ** dim


def _shell_points(n: int, dim: int) -> np.ndarray:
    if dim == 1:
        return np.array([[-n], [n]], dtype=np.int64)
    axis = np.arange(-n, n + 1, dtype=np.int64)
    faces = []
    # points whose first maximal coordinate sits on axis i: coordinates before i are interior
    for i in range(dim):
        for sign in (-n, n):
            parts = []
            for a in range(dim):
                if a < i:
                    parts.append(axis[1:-1])
                elif a == i:
                    parts.append(np.array([sign]))
                else:
                    parts.append(axis)
            grids = np.meshgrid(*parts, indexing="ij")
            faces.append(np.stack([g.ravel() for g in grids], axis=1))
    return np.concatenate(faces)


@dataclass(frozen=True, eq=False)
class SphereNet:
    """Finite tau-net of the unit sphere of span{e_j : j in indices}."""

    indices: tuple[int, ...]
    tau: float
    h: float
    points: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def tree(self) -> cKDTree:
        cached = self.__dict__.get("_tree")
        if cached is None:
            cached = cKDTree(self.points)
            object.__setattr__(self, "_tree", cached)
        return cached

    def nearest(self, v: np.ndarray) -> int:
        """Index of the net point closest to the unit vector v."""
        _, i = self.tree.query(v)
        return int(i)

    def point(self, i: int) -> HVector:
        return HVector({j: (float(c), DyadicScalar()) for j, c in zip(self.indices, self.points[i]) if c != 0})

    def with_indices(self, indices: Sequence[int]) -> "SphereNet":
        if len(indices) != self.dim:
            raise ValueError("index set dimension mismatch")
        net = SphereNet(tuple(indices), self.tau, self.h, self.points)
        if "_tree" in self.__dict__:
            object.__setattr__(net, "_tree", self.__dict__["_tree"])
        return net

    def certificate(self) -> dict:
        return {"dim": self.dim, "tau": self.tau, "h": self.h, "points": len(self), "indices": list(self.indices)}


_NET_CACHE: dict[tuple[int, float], SphereNet] = {}


def build_sphere_net(index_set: Sequence[int], tau: float, dim_cap: int = 4, budget: int = 1_000_000) -> SphereNet:
    dim = len(index_set)
    if not 1 <= dim <= dim_cap:
        raise ValueError(f"net dimension {dim} outside [1, {dim_cap}]")
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0,1), got {tau}")
    n = math.ceil(2 * math.sqrt(dim) / tau)
    size = _shell_size(n, dim)
    if size > budget:
        raise NetBudgetExceeded(size, budget)
    key = (dim, tau)
    if key in _NET_CACHE:
        return _NET_CACHE[key].with_indices(index_set)
    pts = _shell_points(n, dim).astype(float)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts.setflags(write=False)
    net = SphereNet(tuple(index_set), tau, 1.0 / n, pts)
    _NET_CACHE[key] = net
    return net


@dataclass(frozen=True)
class GeoGrid:
    """Magnitudes 2**(m/J) for |m| <= J M."""

    J: int
    M: int

    @property
    def m_range(self) -> range:
        return range(-self.J * self.M, self.J * self.M + 1)

    def __len__(self) -> int:
        return 2 * self.J * self.M + 1

    def value(self, m: int) -> DyadicScalar:
        if abs(m) > self.J * self.M:
            raise IndexError(f"grid exponent {m} outside +-{self.J * self.M}")
        return DyadicScalar(m, self.J)

    @property
    def values(self) -> list[DyadicScalar]:
        return [self.value(m) for m in self.m_range]


@dataclass(frozen=True, eq=False)
class SkSet:
    """S = {alpha u : u in net, alpha in grid}; elements are (point index, m)."""

    net: SphereNet
    grid: GeoGrid

    def __len__(self) -> int:
        return len(self.net) * len(self.grid)

    def element(self, flat: int) -> tuple[int, int]:
        g = len(self.grid)
        return flat // g, flat % g - self.grid.J * self.grid.M

    def vector(self, point: int, m: int) -> HVector:
        """alpha u as a sparse vector with exact dyadic scale."""
        a = self.grid.value(m)
        return HVector({j: (float(c), a) for j, c in zip(self.net.indices, self.net.points[point]) if c != 0})

    def dense(self, point: int, m: int) -> np.ndarray:
        return self.net.points[point] * 2.0 ** (m / self.grid.J)


def grid_exponent(norm: float, grid: GeoGrid) -> int:
    """m = floor(J log2|w| + 1/2), clamped when within one step of the range."""
    x = grid.J * math.log2(norm)
    m = math.floor(x + 0.5)
    top = grid.J * grid.M
    if abs(m) > top:
        if abs(x) <= top + 1:
            m = max(-top, min(top, m))
        else:
            raise OutOfCoverage(f"log2 |w| = {math.log2(norm):.4f} outside [-{grid.M}, {grid.M}]; increase M")
    return m


def discretize(w: HVector | np.ndarray, net: SphereNet, grid: GeoGrid) -> tuple[int, int]:
    """Nearest net direction and rounded grid magnitude for a nonzero w in the net's span.

    Returns ``(point index, m)`` with alpha = 2**(m/J).
    """
    if isinstance(w, HVector):
        stray = set(w.entries) - set(net.indices)
        if stray:
            raise ValueError(f"w has support {sorted(stray)} outside the net's index set")
        w = np.array([w.value(j) for j in net.indices])
    norm = float(np.linalg.norm(w))
    if norm == 0:
        raise ValueError("cannot discretize the zero vector")
    return net.nearest(w / norm), grid_exponent(norm, grid)


def quantization_bound(J: int) -> float:
    return 2.0 ** (1.0 / (2 * J)) - 1.0


def all_points_brute(net: SphereNet, v: np.ndarray) -> int:
    """Exhaustive nearest-point search (test oracle)."""
    d = np.linalg.norm(net.points - v, axis=1)
    return int(np.argmin(d))

