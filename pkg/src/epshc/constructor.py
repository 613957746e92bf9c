"""Target enumeration, lane exponent programs and the candidate vector x.

Lane programs are cumulative: the steps placed in I_{k,j} on lane r move the
running lane exponent from its previous level to the level required by the
(k, j) visit, so the lane product over (0, n_{k,j}] is exactly
alpha_{k,j,r} / beta_{k,j,r} however many earlier block-k intervals the visiting
window also covers.
"""
from __future__ import annotations

import itertools
from bisect import bisect_right
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nets import GeoGrid, SkSet, build_sphere_net
from .schedule import (
    Params,
    Schedule,
    ScheduleError,
    allocate_times,
    build_geometry,
    pack_programs,
)
from .space import DyadicScalar, ZVector, zvector_from_records, zvector_records

X_FORMAT = "epshc.x"
X_VERSION = 1

Component = tuple[int, int] | None  # (net point index, grid exponent m) or zero


@dataclass(frozen=True)
class TargetTuple:
    k: int
    components: tuple[Component, ...]

    def __len__(self) -> int:
        return len(self.components)


def beta(k: int, j: int, R: int) -> DyadicScalar:
    """2**(-(j + R_k)) * 2**(-k**2)."""
    if k < 1 or j < 1:
        raise ValueError("k and j are 1-based")
    return DyadicScalar(-(j + R) - k * k, 1)


def _decode(idx: int, sk: SkSet, include_zero: bool) -> Component:
    if include_zero:
        if idx == 0:
            return None
        idx -= 1
    return sk.element(idx)


def enumerate_targets(
    k: int, sks: Sequence[SkSet], budget: int, seed: int = 0, include_zero: bool = False
) -> tuple[list[TargetTuple], bool]:
    """Tuples of S_{k,0} x ... x S_{k,R_k-1}; returns (tuples, sampled).

    Position in the returned list is j - 1.  The full product (lexicographic)
    is used when it fits in ``budget``; otherwise ``budget`` distinct tuples are
    drawn from a generator seeded by (seed, k).
    """
    sizes = [len(sk) + int(include_zero) for sk in sks]
    total = math.prod(sizes)
    if total <= budget:
        combos = itertools.product(*(range(s) for s in sizes))
        sampled = False
    else:
        rng = np.random.default_rng([seed, k])
        seen: dict[tuple[int, ...], None] = {}
        while len(seen) < budget:
            draw = tuple(int(rng.integers(0, s)) for s in sizes)
            seen.setdefault(draw, None)
        combos = iter(seen)
        sampled = True
    out = [
        TargetTuple(k, tuple(_decode(i, sk, include_zero) for i, sk in zip(combo, sks)))
        for combo in combos
    ]
    return out, sampled


@dataclass(frozen=True)
class LaneTargets:
    """Program data for one (k, j)."""

    k: int
    j: int
    targets: tuple[int | None, ...]  # J * log2(alpha / beta) per lane, None for zero components
    counts: tuple[int, ...]  # signed steps placed in I_{k,j} per lane
    length: int  # L_{k,j}: slots per lane

    @property
    def lane_lengths(self) -> tuple[int, ...]:
        return tuple(abs(c) for c in self.counts)


def step_budget(k: int, j: int, R: int, M: int) -> int:
    """2 M_k + ceil(log2 beta^{-1}), in whole doublings."""
    return 2 * M + (j + R + k * k)


def program_exponents(
    k: int, j: int, s: TargetTuple, J: int, R: int, M: int, levels: Sequence[int] | None = None
) -> tuple[LaneTargets, list[int]]:
    """Step counts realizing alpha_{k,j,r} / beta_{k,j,r} on every lane.

    ``levels`` is the running lane exponent (units of 1/J) left by earlier
    intervals of block k; the updated levels are returned alongside.
    """
    if len(s) != R:
        raise ValueError(f"tuple has {len(s)} components, R_{k} = {R}")
    levels = list(levels) if levels is not None else [0] * R
    targets, counts = [], []
    shift = J * (j + R + k * k)
    for r, comp in enumerate(s.components):
        if comp is None:
            targets.append(None)
            counts.append(0)
            continue
        m = comp[1]
        if abs(m) > J * M:
            raise ValueError(f"grid exponent {m} outside +-{J * M}")
        t = m + shift
        c = t - levels[r]
        if abs(c) > J * step_budget(k, j, R, M):
            raise ScheduleError(f"lane ({k},{r}) at j={j} needs {abs(c)} steps, budget {J * step_budget(k, j, R, M)}")
        targets.append(t)
        counts.append(c)
        levels[r] = t
    length = max(1, max(abs(c) for c in counts))
    return LaneTargets(k, j, tuple(targets), tuple(counts), length), levels


@dataclass(frozen=True)
class Provenance:
    position: int
    k: int
    j: int
    r: int
    beta: DyadicScalar
    point: int
    m: int


@dataclass(frozen=True)
class XVector:
    vector: ZVector
    provenance: tuple[Provenance, ...]

    def norm_sq_from_provenance(self, sks: Mapping[int, Sequence[SkSet]]) -> float:
        """sum beta^2 |u|^2, recomputed from provenance alone."""
        total = 0.0
        for p in self.provenance:
            u = sks[p.k][p.r].net.points[p.point]
            total += math.ldexp(float(np.dot(u, u)), 2 * p.beta.num)
        return total

    def last_position(self, k: int, j: int) -> int:
        """Largest support position among pairs <= (k, j); -1 if there is none."""
        cached = self.__dict__.get("_last")
        if cached is None:
            cached = ([], [])
            for p in sorted(self.provenance, key=lambda p: (p.k, p.j, p.position)):
                cached[0].append((p.k, p.j))
                cached[1].append(p.position)
            object.__setattr__(self, "_last", cached)
        keys, pos = cached
        i = bisect_right(keys, (k, j)) - 1
        return max(pos[: i + 1], default=-1) if i >= 0 else -1

    def truncate(self, k: int, j: int) -> ZVector:
        """x restricted to pairs <= (k, j) in lexicographic order."""
        hi = self.last_position(k, j)
        return self.vector.restrict_positions(lambda pos: pos <= hi)


def certified_norm_sq_bound(params: Params, n_tuples: Mapping[int, int]) -> float:
    """sum_k R_k sum_{j <= J_k} 4**-(j + R_k) 4**-(k^2)."""
    total = 0.0
    for k, count in n_tuples.items():
        R = params.R_k(k)
        geo = (1 - 4.0 ** -count) / 3.0  # sum_{j=1}^{count} 4**-j
        total += R * geo * 4.0 ** (-R - k * k)
    return total


def build_x(schedule: Schedule, sks: Mapping[int, Sequence[SkSet]], tuples: Mapping[int, Sequence[TargetTuple]]) -> XVector:
    entries, prov = [], []
    used: set[int] = set()
    for (k, j, n) in schedule.timeline.visits:
        s = tuples[k][j - 1]
        R = schedule.geometry.block(k).R
        b = beta(k, j, R)
        for r, comp in enumerate(s.components):
            if comp is None:
                continue
            pos = n + r
            if pos in used:
                raise ScheduleError(f"support collision at position {pos} for (k, j, r) = ({k}, {j}, {r})")
            used.add(pos)
            point, m = comp
            net = sks[k][r].net
            for idx, c in zip(net.indices, net.points[point]):
                if c != 0:
                    entries.append((pos, idx, float(c), b))
            prov.append(Provenance(pos, k, j, r, b, point, m))
    return XVector(ZVector.from_entries(entries), tuple(prov))


@dataclass
class Construction:
    """Everything built from one Params: schedule, target sets, tuples and x."""

    params: Params
    schedule: Schedule
    sks: dict[int, list[SkSet]]
    tuples: dict[int, list[TargetTuple]]
    sampled: dict[int, bool]
    lane_targets: dict[tuple[int, int], LaneTargets]
    x: XVector
    _lookup: dict = field(default_factory=dict, repr=False)

    @property
    def geometry(self):
        return self.schedule.geometry

    @property
    def timeline(self):
        return self.schedule.timeline

    def j_of(self, s: TargetTuple) -> int | None:
        if not self._lookup:
            for k, ts in self.tuples.items():
                for j, t in enumerate(ts, start=1):
                    self._lookup[(k, t.components)] = j
        return self._lookup.get((s.k, s.components))

    def state(self, k: int, j: int) -> ZVector:
        """The visit state s^{(k,j)} placed at coordinates 0..R_k-1."""
        s = self.tuples[k][j - 1]
        coords = {}
        for r, comp in enumerate(s.components):
            if comp is not None:
                coords[r] = self.sks[k][r].vector(*comp)
        return ZVector(coords)

    def certified_norm_sq_bound(self) -> float:
        return certified_norm_sq_bound(self.params, {k: len(v) for k, v in self.tuples.items()})

    def x_document(self) -> dict:
        return {
            "format": X_FORMAT,
            "version": X_VERSION,
            "entries": zvector_records(self.x.vector),
            "provenance": [
                [p.position, p.k, p.j, p.r, p.beta.num, p.beta.den, p.point, p.m] for p in self.x.provenance
            ],
            "tuples": {
                str(k): [[list(c) if c is not None else None for c in t.components] for t in ts]
                for k, ts in sorted(self.tuples.items())
            },
            "sampled": {str(k): v for k, v in sorted(self.sampled.items())},
            "nets": {
                f"{k}:{r}": sk.net.certificate() | {"grid_J": sk.grid.J, "grid_M": sk.grid.M}
                for k, lst in sorted(self.sks.items())
                for r, sk in enumerate(lst)
            },
            "norm_sq_bound": self.certified_norm_sq_bound(),
        }

    def x_json(self) -> str:
        return json.dumps(self.x_document(), sort_keys=True, separators=(",", ":"))


def load_x(text: str) -> tuple[ZVector, list[Provenance]]:
    doc = json.loads(text)
    if doc.get("format") != X_FORMAT:
        raise ValueError("unrecognized x document")
    prov = [
        Provenance(pos, k, j, r, DyadicScalar(bn, bd), point, m)
        for pos, k, j, r, bn, bd, point, m in doc["provenance"]
    ]
    return zvector_from_records(doc["entries"]), prov


def build_sksets(params: Params, geometry) -> dict[int, list[SkSet]]:
    out = {}
    for k in params.blocks:
        grid = GeoGrid(params.J_k(k), params.M_k(k))
        b = geometry.block(k)
        out[k] = [
            SkSet(build_sphere_net(lane, params.tau_k(k), params.net_dim_cap, params.net_budget), grid)
            for lane in b.lanes
        ]
    return out


def construct(params: Params) -> Construction:
    """Run the whole build: geometry, nets, targets, programs, timeline, x."""
    params.validate()
    geometry = build_geometry(params)
    sks = build_sksets(params, geometry)
    tuples, sampled, lane_targets = {}, {}, {}
    for k in params.blocks:
        tuples[k], sampled[k] = enumerate_targets(
            k, sks[k], params.target_budget, params.seed, params.include_zero
        )
        levels = None
        for j, s in enumerate(tuples[k], start=1):
            lt, levels = program_exponents(k, j, s, params.J_k(k), params.R_k(k), params.M_k(k), levels)
            lane_targets[(k, j)] = lt
    timeline = allocate_times(
        {k: params.R_k(k) for k in params.blocks},
        {key: lt.length for key, lt in lane_targets.items()},
        guard=params.guard,
        time_cap=params.time_cap,
    )
    program = pack_programs(
        timeline, {k: params.J_k(k) for k in params.blocks}, {key: lt.counts for key, lt in lane_targets.items()}
    )
    schedule = Schedule(params, geometry, timeline, program)
    x = build_x(schedule, sks, tuples)
    return Construction(params, schedule, sks, tuples, sampled, lane_targets, x)
