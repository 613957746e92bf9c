"""Block geometry, time allocation and the weight sequence A_1, A_2, ...

Each weight A_l is diagonal in the basis (e_j) and is one of:

* the identity;
* a scalar ``2**(step/J_k)`` on one lane E_{k,r} (a programmed lane time);
* diag(1, 2) or diag(1, 1/2) on the plane span{e_0, e_{m_k}} (barrier times).

Lane products over time windows are answered from per-lane prefix sums of the
integer steps, so any window costs two binary searches.
"""
from __future__ import annotations

import hashlib
import json
import math
from bisect import bisect_left, bisect_right
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .space import ONE, DyadicScalar, HVector

SCHEDULE_FORMAT = "epshc.schedule"
SCHEDULE_VERSION = 1


class ConfigError(ValueError):
    """Invalid parameters; ``violations`` lists every failed check."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ScheduleError(RuntimeError):
    pass


def smallest_grid_den(tau: float) -> int:
    """Smallest J >= 1 with 2**(1/(2J)) - 1 <= tau."""
    J = max(1, math.ceil(1.0 / (2.0 * math.log2(1.0 + tau))))
    while 2.0 ** (1.0 / (2 * J)) - 1.0 > tau:
        J += 1
    while J > 1 and 2.0 ** (1.0 / (2 * (J - 1))) - 1.0 <= tau:
        J -= 1
    return J


@dataclass(frozen=True)
class Params:
    """Construction parameters.  Per-block sequences default to the rules

    R_k = k+1, d_k = R_k (k+1), tau_k = eta_k = eps / 2**(k+2), M_k = k+1,
    gamma = eps/2, and J_k the smallest grid denominator fine enough for tau_k.
    """

    epsilon: float = 0.5
    k_max: int = 2
    R: tuple[int, ...] | None = None
    d: tuple[int, ...] | None = None
    gamma: float | None = None
    tau: tuple[float, ...] | None = None
    eta: tuple[float, ...] | None = None
    M: tuple[int, ...] | None = None
    J: tuple[int, ...] | None = None
    block_mode: str = "nested"
    truncation_mode: str = "strict"
    multiplier_mode: str = "fractional"
    target_budget: int = 2000
    seed: int = 0
    include_zero: bool = False
    net_dim_cap: int = 4
    net_budget: int = 1_000_000
    exponent_cap: int = 500
    time_cap: int = 10**9

    def __post_init__(self):
        for name in ("R", "d", "tau", "eta", "M", "J"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, tuple):
                object.__setattr__(self, name, tuple(v))

    # per-block rules, k is 1-based
    def _pick(self, seq, k, default):
        if seq is None:
            return default
        if k - 1 >= len(seq):
            raise ConfigError([f"per-block list has {len(seq)} entries, block {k} requested"])
        return seq[k - 1]

    def R_k(self, k: int) -> int:
        return int(self._pick(self.R, k, k + 1))

    def d_k(self, k: int) -> int:
        return int(self._pick(self.d, k, self.R_k(k) * (k + 1)))

    def tau_k(self, k: int) -> float:
        return float(self._pick(self.tau, k, self.epsilon / 2 ** (k + 2)))

    def eta_k(self, k: int) -> float:
        return float(self._pick(self.eta, k, self.epsilon / 2 ** (k + 2)))

    def M_k(self, k: int) -> int:
        return int(self._pick(self.M, k, k + 1))

    def J_k(self, k: int) -> int:
        if self.multiplier_mode == "integer_grid":
            return 1
        return int(self._pick(self.J, k, smallest_grid_den(self.tau_k(k))))

    @property
    def gamma_value(self) -> float:
        return self.epsilon / 2 if self.gamma is None else float(self.gamma)

    @property
    def blocks(self) -> range:
        return range(1, self.k_max + 1)

    @property
    def guard(self) -> int:
        return max(self.R_k(k) for k in self.blocks)

    def violations(self) -> list[str]:
        out = []
        if not 0 < self.epsilon < 1:
            out.append(f"epsilon must lie in (0,1), got {self.epsilon}")
        if self.k_max < 1:
            return out + [f"k_max must be >= 1, got {self.k_max}"]
        for name in ("R", "d", "tau", "eta", "M", "J"):
            seq = getattr(self, name)
            if seq is not None and len(seq) < self.k_max:
                out.append(f"{name} has {len(seq)} entries but k_max = {self.k_max}")
        if out:
            return out
        if self.block_mode not in ("disjoint", "nested"):
            out.append(f"block_mode must be 'disjoint' or 'nested', got {self.block_mode!r}")
        if self.truncation_mode not in ("strict", "full"):
            out.append(f"truncation_mode must be 'strict' or 'full', got {self.truncation_mode!r}")
        if self.multiplier_mode not in ("fractional", "integer_grid"):
            out.append(f"multiplier_mode must be 'fractional' or 'integer_grid', got {self.multiplier_mode!r}")
        if self.target_budget < 1:
            out.append("target_budget must be >= 1")
        g = self.gamma_value
        if not 0 < g < self.epsilon:
            out.append(f"gamma must lie in (0, epsilon), got {g}")
        prev_R = 0
        for k in self.blocks:
            R, d = self.R_k(k), self.d_k(k)
            tau, eta, M, J = self.tau_k(k), self.eta_k(k), self.M_k(k), self.J_k(k)
            if R < 1:
                out.append(f"R_{k} must be >= 1, got {R}")
            if R < prev_R:
                out.append(f"R_k must be nondecreasing: R_{k} = {R} < R_{k-1} = {prev_R}")
            prev_R = R
            if d < R:
                out.append(f"d_{k} = {d} < R_{k} = {R}: lane E_{{{k},r}} would be empty")
            elif math.ceil(d / R) > self.net_dim_cap:
                out.append(f"lane dimension {math.ceil(d / R)} of block {k} exceeds net_dim_cap {self.net_dim_cap}")
            if not 0 < tau < 1:
                out.append(f"tau_{k} must lie in (0,1), got {tau}")
            if not 0 < eta < 1:
                out.append(f"eta_{k} must lie in (0,1), got {eta}")
            if tau + eta + g > self.epsilon:
                out.append(
                    f"tau_{k} + eta_{k} + gamma <= epsilon violated: "
                    f"{tau} + {eta} + {g} = {tau + eta + g} > {self.epsilon}"
                )
            if M < 1:
                out.append(f"M_{k} must be >= 1, got {M}")
            if J < 1:
                out.append(f"J_{k} must be >= 1, got {J}")
            elif 2.0 ** (1.0 / (2 * J)) - 1.0 > tau:
                out.append(f"2^(1/(2 J_{k})) - 1 <= tau_{k} violated for J_{k} = {J}, tau_{k} = {tau}")
        return out

    def validate(self) -> "Params":
        bad = self.violations()
        if bad:
            raise ConfigError(bad)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("R", "d", "tau", "eta", "M", "J"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "Params":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {key!r}" for key in unknown])
        return cls(**dict(data))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class BlockInfo:
    k: int
    N: int
    d: int
    R: int
    lanes: tuple[tuple[int, ...], ...]

    @property
    def m(self) -> int:
        return self.N + 1

    @property
    def indices(self) -> range:
        return range(self.N + 1, self.N + self.d + 1)


@dataclass(frozen=True)
class BlockGeometry:
    blocks: tuple[BlockInfo, ...]
    block_mode: str = "nested"

    @property
    def k_max(self) -> int:
        return len(self.blocks)

    @property
    def max_index(self) -> int:
        last = self.blocks[-1]
        return last.N + last.d

    def block(self, k: int) -> BlockInfo:
        if not 1 <= k <= len(self.blocks):
            raise KeyError(f"unknown block index {k}")
        return self.blocks[k - 1]

    def f_indices(self, k: int) -> list[int]:
        b = self.block(k)
        if self.block_mode == "nested":
            return list(range(0, b.N + b.d + 1))
        return [0, *b.indices]

    def f_membership(self, k: int):
        b = self.block(k)
        hi = b.N + b.d
        if self.block_mode == "nested":
            return lambda j: 0 <= j <= hi
        lo = b.N + 1
        return lambda j: j == 0 or lo <= j <= hi

    def lane_of(self, j: int) -> tuple[int, int] | None:
        """Block and residue of internal index j, or None for e_0 and indices past the last block."""
        if j < 1 or j > self.max_index:
            return None
        for b in self.blocks:
            if j <= b.N + b.d:
                return b.k, (j - b.N - 1) % b.R
        return None

    def to_dict(self) -> list[dict]:
        return [
            {"k": b.k, "N": b.N, "d": b.d, "R": b.R, "m": b.m, "lanes": [list(l) for l in b.lanes]}
            for b in self.blocks
        ]


def build_geometry(p: Params) -> BlockGeometry:
    bad = [v for v in p.violations() if "lane" in v or "d_" in v]
    if bad:
        raise ConfigError(bad)
    blocks = []
    N = 0
    for k in p.blocks:
        R, d = p.R_k(k), p.d_k(k)
        if d < R:
            raise ConfigError([f"d_{k} = {d} < R_{k} = {R}: empty lane"])
        lanes = tuple(tuple(range(N + 1 + r, N + d + 1, R)) for r in range(R))
        blocks.append(BlockInfo(k=k, N=N, d=d, R=R, lanes=lanes))
        N += d
    return BlockGeometry(tuple(blocks), p.block_mode)


# ---------------------------------------------------------------------------
# timeline

IDENTITY, LANE, BARRIER1, BARRIER2 = "identity", "lane-step", "barrier-1", "barrier-2"


@dataclass(frozen=True)
class Timeline:
    barriers: Mapping[int, tuple[int, int]]
    intervals: Mapping[tuple[int, int], tuple[int, int]]
    R: Mapping[int, int]
    guard: int
    # directory of non-identity segments: (start, end, role, k, j), sorted by start
    segments: tuple[tuple[int, int, str, int, int], ...] = field(repr=False)

    @property
    def visits(self) -> list[tuple[int, int, int]]:
        """(k, j, n_{k,j}) in lexicographic order of (k, j)."""
        return [(k, j, end) for (k, j), (_, end) in sorted(self.intervals.items())]

    def n(self, k: int, j: int) -> int:
        return self.intervals[(k, j)][1]

    @property
    def horizon(self) -> int:
        return self.segments[-1][1] if self.segments else 0

    def role(self, t: int) -> tuple[str, int, int]:
        """Role of time t with its block and interval index (0 for barriers and identity)."""
        i = bisect_right(self._starts, t) - 1
        if i >= 0:
            s, e, role, k, j = self.segments[i]
            if s <= t <= e:
                return role, k, j
        return IDENTITY, 0, 0

    @property
    def _starts(self) -> list[int]:
        cached = self.__dict__.get("_starts_cache")
        if cached is None:
            cached = [s[0] for s in self.segments]
            object.__setattr__(self, "_starts_cache", cached)
        return cached

    def barrier_times(self) -> list[tuple[int, int, int]]:
        """(time, k, kind) for every barrier, sorted by time; kind is 1 or 2."""
        out = []
        for k, (b1, b2) in self.barriers.items():
            out += [(b1, k, 1), (b2, k, 2)]
        return sorted(out)


def allocate_times(
    R: Mapping[int, int] | Sequence[int],
    lengths: Mapping[tuple[int, int], int],
    guard: int | None = None,
    time_cap: int = 10**9,
) -> Timeline:
    """Greedy sequential allocation.

    For each block: b1, b2 on the next two free times, then every I_{k,j}
    (length L_{k,j} R_k, in j order) followed by ``guard`` identity times.
    The first interval of block k starts no earlier than time R_k so every
    lane-r slot lies strictly after r.
    """
    if not isinstance(R, Mapping):
        R = {k: r for k, r in enumerate(R, start=1)}
    if guard is None:
        guard = max(R.values(), default=0)
    by_block: dict[int, list[int]] = {k: [] for k in R}
    for (k, j), L in lengths.items():
        if L < 1:
            raise ScheduleError(f"interval length L_{{{k},{j}}} = {L} must be positive")
        by_block[k].append(j)
    t = 1
    barriers, intervals, segments = {}, {}, []
    for k in sorted(R):
        Rk = R[k]
        barriers[k] = (t, t + 1)
        segments += [(t, t, BARRIER1, k, 0), (t + 1, t + 1, BARRIER2, k, 0)]
        t = max(t + 2, Rk)
        for j in sorted(by_block[k]):
            start = t
            end = start + lengths[(k, j)] * Rk - 1
            if end + guard > time_cap:
                raise ScheduleError(f"time index {end + guard} exceeds cap {time_cap}")
            intervals[(k, j)] = (start, end)
            segments.append((start, end, LANE, k, j))
            t = end + 1 + guard
    return Timeline(barriers, intervals, dict(R), guard, tuple(segments))


# ---------------------------------------------------------------------------
# lane programs


@dataclass(frozen=True)
class LaneProgram:
    """Signed step counts per (k, j, r), packed greedily and sign-uniformly.

    ``runs[(k, j, r)] = (first_time, count, step)`` means lane (k, r) steps by
    ``step`` at times first_time, first_time + R_k, ... (``count`` times).
    """

    den: Mapping[int, int]
    R: Mapping[int, int]
    runs: Mapping[tuple[int, int, int], tuple[int, int, int]]

    @property
    def _index(self) -> dict:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {}
            lanes: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
            for (k, j, r), run in self.runs.items():
                if run[1] > 0 and run[2] != 0:
                    lanes.setdefault((k, r), []).append(run)
            for key, rs in lanes.items():
                rs.sort()
                Rk = self.R[key[0]]
                times = np.concatenate([np.arange(t0, t0 + c * Rk, Rk, dtype=np.int64) for t0, c, _ in rs])
                steps = np.concatenate([np.full(c, s, dtype=np.int64) for _, c, s in rs])
                cum = np.concatenate([[0], np.cumsum(steps)])
                cached[key] = (times, steps, cum)
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def step_at(self, k: int, r: int, t: int) -> int:
        entry = self._index.get((k, r))
        if entry is None:
            return 0
        times, steps, _ = entry
        i = bisect_left(times, t)
        if i < len(times) and times[i] == t:
            return int(steps[i])
        return 0

    def cumulative_steps(self, k: int, r: int, t: int) -> int:
        """Sum of lane (k, r) steps at times <= t."""
        entry = self._index.get((k, r))
        if entry is None:
            return 0
        times, _, cum = entry
        return int(cum[bisect_right(times, t)])

    def window_steps(self, k: int, r: int, a: int, b: int) -> int:
        return self.cumulative_steps(k, r, b) - self.cumulative_steps(k, r, a)

    def lane_product(self, k: int, r: int, a: int, b: int) -> DyadicScalar:
        """Product of lane (k, r) multipliers over the window (a, b]."""
        if b < a:
            raise ValueError(f"window ({a}, {b}] is reversed")
        s = self.window_steps(k, r, a, b)
        return DyadicScalar(s, self.den[k]) if s else ONE


def pack_programs(
    timeline: Timeline, den: Mapping[int, int], counts: Mapping[tuple[int, int], Sequence[int]]
) -> LaneProgram:
    """Place the signed step counts ``counts[(k, j)][r]`` inside each I_{k,j}."""
    runs = {}
    for (k, j), per_lane in counts.items():
        start, end = timeline.intervals[(k, j)]
        Rk = timeline.R[k]
        slots = (end - start + 1) // Rk
        for r, c in enumerate(per_lane):
            if abs(c) > slots:
                raise ScheduleError(f"lane ({k},{r}) needs {abs(c)} slots in I_{{{k},{j}}}, has {slots}")
            first = start + ((r - start) % Rk)
            runs[(k, j, r)] = (first, abs(c), (c > 0) - (c < 0))
    return LaneProgram(dict(den), dict(timeline.R), runs)


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class WeightDescriptor:
    """Closed description of one weight A_l (all weights are diagonal)."""

    kind: str = IDENTITY
    k: int = 0
    r: int = 0
    step: int = 0
    den: int = 1
    lane: tuple[int, ...] = ()
    m: int = 0

    def factor(self, j: int) -> DyadicScalar:
        if self.kind == LANE and self.step and j in self.lane:
            return DyadicScalar(self.step, self.den)
        if self.kind == BARRIER1 and j == self.m:
            return DyadicScalar(1, 1)
        if self.kind == BARRIER2 and j == self.m:
            return DyadicScalar(-1, 1)
        return ONE

    def apply(self, v: HVector) -> HVector:
        if self.kind == IDENTITY or (self.kind == LANE and not self.step):
            return v
        return HVector({j: (mant, s * self.factor(j)) for j, (mant, s) in v.entries.items()})

    def norm(self) -> float:
        if self.kind == LANE:
            return max(1.0, 2.0 ** (self.step / self.den))
        if self.kind == BARRIER1:
            return 2.0
        return 1.0

    def dense(self, dim: int) -> np.ndarray:
        return np.diag([float(self.factor(j)) for j in range(dim)])


class Schedule:
    """Geometry + timeline + lane programs; the full description of T."""

    def __init__(self, params: Params, geometry: BlockGeometry, timeline: Timeline, program: LaneProgram):
        self.params = params
        self.geometry = geometry
        self.timeline = timeline
        self.program = program
        self._barrier_list = timeline.barrier_times()
        self._barrier_t = [b[0] for b in self._barrier_list]
        self._barrier_by_block = {k: (b1, b2) for k, (b1, b2) in timeline.barriers.items()}

    def weight_action(self, t: int) -> WeightDescriptor:
        return weight_action(t, self.geometry, self.timeline, self.program)

    def lane_product(self, k: int, r: int, a: int, b: int) -> DyadicScalar:
        return self.program.lane_product(k, r, a, b)

    def operator_norm_bound(self) -> float:
        return operator_norm_bound(self.geometry, self.timeline, self.program)

    def barrier_exponent(self, k: int, a: int, b: int) -> int:
        """Net power of two applied to e_{m_k} by barrier times in (a, b]."""
        b1, b2 = self._barrier_by_block.get(k, (None, None))
        if b1 is None:
            return 0
        return int(a < b1 <= b) - int(a < b2 <= b)

    def to_dict(self) -> dict:
        tl = self.timeline
        runs = [
            [k, j, r, t0, c, s]
            for (k, j, r), (t0, c, s) in sorted(self.program.runs.items())
        ]
        return {
            "format": SCHEDULE_FORMAT,
            "version": SCHEDULE_VERSION,
            "params": self.params.to_dict(),
            "geometry": self.geometry.to_dict(),
            "grid_den": {str(k): v for k, v in sorted(self.program.den.items())},
            "guard": tl.guard,
            "timeline": [list(s) for s in tl.segments],
            "lane_programs": runs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: Mapping) -> "Schedule":
        if data.get("format") != SCHEDULE_FORMAT or data.get("version") != SCHEDULE_VERSION:
            raise ScheduleError("unrecognized schedule document")
        params = Params.from_dict(data["params"])
        geometry = BlockGeometry(
            tuple(
                BlockInfo(b["k"], b["N"], b["d"], b["R"], tuple(tuple(l) for l in b["lanes"]))
                for b in data["geometry"]
            ),
            params.block_mode,
        )
        R = {b.k: b.R for b in geometry.blocks}
        barriers, intervals, segments = {}, {}, []
        for s, e, role, k, j in data["timeline"]:
            segments.append((s, e, role, k, j))
            if role == BARRIER1:
                barriers[k] = (s, barriers.get(k, (0, 0))[1])
            elif role == BARRIER2:
                barriers[k] = (barriers.get(k, (0, 0))[0], s)
            else:
                intervals[(k, j)] = (s, e)
        timeline = Timeline(barriers, intervals, R, data["guard"], tuple(segments))
        den = {int(k): v for k, v in data["grid_den"].items()}
        runs = {(k, j, r): (t0, c, s) for k, j, r, t0, c, s in data["lane_programs"]}
        return cls(params, geometry, timeline, LaneProgram(den, R, runs))


def weight_action(t: int, g: BlockGeometry, tl: Timeline, prog: LaneProgram) -> WeightDescriptor:
    if t < 1:
        raise ValueError(f"weights are indexed from 1, got {t}")
    role, k, _ = tl.role(t)
    if role == LANE:
        b = g.block(k)
        r = t % b.R
        return WeightDescriptor(LANE, k, r, prog.step_at(k, r, t), prog.den[k], b.lanes[r], b.m)
    if role in (BARRIER1, BARRIER2):
        return WeightDescriptor(role, k, m=g.block(k).m)
    return WeightDescriptor()


def operator_norm_bound(g: BlockGeometry, tl: Timeline, prog: LaneProgram) -> float:
    best = 1.0
    if tl.barriers:
        best = 2.0
    for (k, _r), (_, steps, _) in prog._index.items():
        if len(steps) and steps.max() > 0:
            best = max(best, 2.0 ** (1.0 / prog.den[k]))
    return best
