"""Finite experiments for the upper chain, the lower barrier and the delta scan."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .constructor import Construction, TargetTuple
from .nets import OutOfCoverage, discretize
from .orbit import orbit_at, orbit_norm_sq
from .space import ONE, ExponentOverflow, HVector, ZVector, h_sub, project_block, z_sub

OK = "ok"
TRUNCATION_INSUFFICIENT = "truncation-insufficient"
TUPLE_MISSING = "tuple-missing"
OUT_OF_COVERAGE = "out-of-coverage"


def tail_profile(y: ZVector, geometry) -> list[float]:
    """||Q_k y||_Z for k = 1..k_max."""
    return [project_block(y, k, geometry, "Q").norm() for k in range(1, geometry.k_max + 1)]


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Target:
    y: ZVector
    family: str  # "random" | "exact" | "barrier"
    k: int = 0
    j: int = 0
    K: float = 0.0

    @property
    def in_coverage(self) -> bool:
        return self.family != "barrier"


def _dense_to_h(indices: Sequence[int], vals: np.ndarray) -> HVector:
    return HVector({int(j): (float(v), ONE) for j, v in zip(indices, vals) if v != 0})


def _merge(*parts: HVector) -> HVector:
    out: dict[int, float] = {}
    for p in parts:
        for j, v in p.values().items():
            out[j] = out.get(j, 0.0) + v
    return HVector.from_values(out)


def _random_direction(rng: np.random.Generator, dim: int, norm: float) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v) * norm


def random_target(c: Construction, k: int, j: int, rng: np.random.Generator) -> ZVector:
    """A target near the visit state of (k, j), with every error budget partly used.

    Per coordinate r < R_k: the net direction perturbed inside its lane, the
    magnitude moved less than half a grid step, plus a little off-lane mass in
    F_k.  Then mass outside F_k below 0.9 eta_k and positional tail beyond R_k
    below 0.9 gamma (both relative to the core norm).
    """
    p, g = c.params, c.geometry
    b = g.block(k)
    tau, eta, gamma = p.tau_k(k), p.eta_k(k), p.gamma_value
    s = c.tuples[k][j - 1]
    J, M = p.J_k(k), p.M_k(k)
    coords: dict[int, HVector] = {}
    for r, comp in enumerate(s.components):
        if comp is None:
            continue
        sk = c.sks[k][r]
        point, m = comp
        while True:
            u = sk.net.points[point]
            v = u + _random_direction(rng, len(u), rng.uniform(0, tau / 4))
            v /= np.linalg.norm(v)
            shift = rng.uniform(0, 0.45)
            if m == J * M or (m != -J * M and rng.random() < 0.5):
                shift = -shift
            rho = 2.0 ** ((m + shift) / J)
            lane = _dense_to_h(sk.net.indices, rho * v)
            off_idx = [0] + [i for rr, l in enumerate(b.lanes) if rr != r for i in l]
            off = _dense_to_h(off_idx, _random_direction(rng, len(off_idx), rho * rng.uniform(0, tau / 4)))
            yr = _merge(lane, off)
            err = h_sub(sk.vector(point, m), yr).norm()
            if err <= 2 * tau * yr.norm():
                break
        coords[r] = yr
    core = ZVector(coords).norm()
    outside = list(range(g.max_index + 1, g.max_index + 6))
    q = _random_direction(rng, len(outside) * b.R, rng.uniform(0, 0.9) * eta * core).reshape(b.R, -1)
    for r in range(b.R):
        coords[r] = _merge(coords.get(r, HVector()), _dense_to_h(outside, q[r]))
    inside = [0, *b.indices]
    n_tail = int(rng.integers(1, 4))
    tail = _random_direction(rng, len(inside) * n_tail, rng.uniform(0, 0.9) * gamma * core).reshape(n_tail, -1)
    for i in range(n_tail):
        coords[b.R + i] = _dense_to_h(inside, tail[i])
    return ZVector({r: v for r, v in coords.items() if v})


def generate_corpus(
    c: Construction, n_random: int = 500, n_exact: int = 50, barrier_K: Sequence[float] = (0.5, 1.0, 2.0), seed: int = 0
) -> list[Target]:
    rng = np.random.default_rng([seed, 0xC0])
    blocks = list(c.params.blocks)
    out = []
    for i in range(n_random):
        k = blocks[i % len(blocks)]
        j = int(rng.integers(1, len(c.tuples[k]) + 1))
        out.append(Target(random_target(c, k, j, rng), "random", k, j))
    for i in range(n_exact):
        k = blocks[i % len(blocks)]
        j = int(rng.integers(1, len(c.tuples[k]) + 1))
        out.append(Target(c.state(k, j), "exact", k, j))
    for K in barrier_K:
        out.append(Target(ZVector({0: HVector({0: (float(K), ONE)})}), "barrier", K=float(K)))
    return out


# ---------------------------------------------------------------------------
# upper experiment


@dataclass
class ErrorBudget:
    status: str
    norm_y: float
    R: int = 0
    k: int = 0
    j: int = 0
    n: int = 0
    method: str = ""
    net_sq: float = 0.0
    internal_sq: float = 0.0
    positional_sq: float = 0.0
    rho: float = 0.0
    realized: float = math.inf
    bound: float = math.inf
    tau: float = 0.0
    eta: float = 0.0
    gamma: float = 0.0

    @property
    def relative(self) -> float:
        return self.realized / self.norm_y

    @property
    def reconstructed_sq(self) -> float:
        return self.net_sq + self.internal_sq + self.positional_sq

    @property
    def reconstruction_error(self) -> float:
        """Relative mismatch between the decomposition and the realized error squared."""
        real = self.realized**2
        if real == 0:
            return abs(self.reconstructed_sq)
        return abs(self.reconstructed_sq - real) / real

    def row(self) -> dict:
        d = asdict(self)
        d["relative"] = self.relative
        return d


def _positional_R(y: ZVector, gamma: float) -> int:
    """Smallest R with sum_{r >= R} |y_r|^2 <= gamma^2 |y|^2."""
    pos = y.positions
    sq = [y.coords[r].norm_sq() for r in pos]
    total = sum(sq)
    limit = gamma * gamma * total
    tail = 0.0
    R = pos[-1] + 1 if pos else 0
    for i in range(len(pos) - 1, -1, -1):
        tail += sq[i]
        if tail > limit:
            break
        R = pos[i]
    return R


class _TupleTable:
    """Dense copies of the enumerated tuples of one block, for the certified search."""

    def __init__(self, c: Construction, k: int):
        ts = c.tuples[k]
        self.R = c.geometry.block(k).R
        self.present = np.zeros((len(ts), self.R), dtype=bool)
        self.states = []
        for r in range(self.R):
            sk = c.sks[k][r]
            arr = np.zeros((len(ts), sk.net.dim))
            for i, t in enumerate(ts):
                comp = t.components[r]
                if comp is not None:
                    arr[i] = sk.dense(*comp)
                    self.present[i, r] = True
            self.states.append(arr)


def _tuple_table(c: Construction, k: int) -> _TupleTable:
    cache = c.__dict__.setdefault("_tuple_tables", {})
    if k not in cache:
        cache[k] = _TupleTable(c, k)
    return cache[k]


def _certified_search(c: Construction, k: int, lanes: list[np.ndarray], off_sq: list[float], tau: float) -> int | None:
    """Index (1-based j) of the enumerated tuple with every coordinate within 2 tau |P_k y_r|."""
    table = _tuple_table(c, k)
    n = len(c.tuples[k])
    ok = np.ones(n, dtype=bool)
    total = np.zeros(n)
    for r in range(table.R):
        pk_sq = float(lanes[r] @ lanes[r]) + off_sq[r]
        err_sq = np.sum((table.states[r] - lanes[r]) ** 2, axis=1) + off_sq[r]
        ok &= err_sq <= (2 * tau) ** 2 * pk_sq
        total += err_sq
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    return int(idx[np.argmin(total[idx])]) + 1


def upper_experiment(y: ZVector, c: Construction, truncation_mode: str | None = None) -> ErrorBudget:
    """Run the upper-bound recipe on one target.

    Choose the positional cut R (gamma), then the first block k with R <= R_k
    and |Q_k y| <= eta_k |y|, discretize every P_k y_r (r < R_k) onto its lane
    net, find the visiting time of that tuple and measure |T^n x - y|.
    """
    p, g = c.params, c.geometry
    mode = truncation_mode or p.truncation_mode
    ny = y.norm()
    if ny == 0:
        raise ValueError("target must be nonzero")
    gamma = p.gamma_value
    R = _positional_R(y, gamma)
    for k in p.blocks:
        if R <= p.R_k(k) and project_block(y, k, g, "Q").norm() <= p.eta_k(k) * ny:
            break
    else:
        return ErrorBudget(TRUNCATION_INSUFFICIENT, ny, R=R, gamma=gamma)
    tau, eta = p.tau_k(k), p.eta_k(k)
    b = g.block(k)
    inside = g.f_membership(k)
    comps, lanes, off_sq = [], [], []
    for r in range(b.R):
        yr = y[r]
        lane_set = set(b.lanes[r])
        lane_vec = np.array([yr.value(i) for i in b.lanes[r]])
        lanes.append(lane_vec)
        off_sq.append(yr.restrict(lambda i: inside(i) and i not in lane_set).norm_sq())
        if not lane_vec.any():
            comps.append(None)
            continue
        try:
            comps.append(discretize(lane_vec, c.sks[k][r].net, c.sks[k][r].grid))
        except OutOfCoverage:
            return ErrorBudget(OUT_OF_COVERAGE, ny, R=R, k=k, tau=tau, eta=eta, gamma=gamma)
    j = c.j_of(TargetTuple(k, tuple(comps)))
    method = "nearest"
    if j is None:
        j = _certified_search(c, k, lanes, off_sq, tau)
        method = "certified-search"
        if j is None:
            return ErrorBudget(TUPLE_MISSING, ny, R=R, k=k, tau=tau, eta=eta, gamma=gamma)
    n = c.timeline.n(k, j)
    cap = c.x.last_position(k, j) if mode == "strict" else None
    # exact orbit on the coordinates y occupies; beyond them only the norm matters
    reach = y.positions[-1]
    near_cap = n + reach if cap is None else min(cap, n + reach)
    tnx = orbit_at(c.x.vector, n, c.schedule, max_position=near_cap)
    far_sq = orbit_norm_sq(c.x.vector, n, c.schedule, min_position=n + reach + 1, max_position=cap)
    diff = z_sub(tnx, y)
    state = c.state(k, j)
    net_sq = internal_sq = 0.0
    for r in range(b.R):
        pk = y[r].restrict(inside)
        net_sq += h_sub(state[r], pk).norm_sq()
        internal_sq += y[r].restrict(lambda i: not inside(i)).norm_sq()
    positional_sq = diff.restrict_positions(lambda r: r >= b.R).norm_sq() + far_sq
    rho = math.sqrt(tnx.restrict_positions(lambda r: r >= b.R).norm_sq() + far_sq)
    realized = math.sqrt(diff.norm_sq() + far_sq)
    bound = math.sqrt((2 * tau) ** 2 + eta**2 + gamma**2) + rho / ny
    return ErrorBudget(
        OK, ny, R, k, j, n, method, net_sq, internal_sq, positional_sq, rho, realized, bound, tau, eta, gamma
    )


# ---------------------------------------------------------------------------
# lower barrier


@dataclass
class BarrierSample:
    k: int
    which: int
    n: int
    K: float
    a_n: float
    barrier: float
    realized: float
    holds: bool

    @property
    def relative_barrier(self) -> float:
        return self.barrier / self.K

    @property
    def relative_realized(self) -> float:
        return self.realized / self.K


def lower_experiment(u: ZVector, K: float, c: Construction, k_range: Iterable[int] | None = None) -> list[BarrierSample]:
    """Compare T^n u with v = K e_0 (at coordinate 0) at both barrier times of each block."""
    if not u:
        raise ValueError("u must be nonzero")
    v = ZVector({0: HVector({0: (float(K), ONE)})})
    out = []
    for k in k_range or c.params.blocks:
        for which, n in enumerate(c.timeline.barriers[k], start=1):
            a_n = u[n].value(0)
            barrier = abs(K - a_n)
            try:
                realized = z_sub(orbit_at(u, n, c.schedule), v).norm()
            except ExponentOverflow:
                # |T^n u - v| is beyond 2**EXPONENT_CAP, far above any finite barrier
                realized = math.inf
            out.append(BarrierSample(k, which, n, float(K), a_n, barrier, realized, realized >= barrier))
    return out


# ---------------------------------------------------------------------------
# delta scan


def _visit_errors(c: Construction, y: ZVector) -> np.ndarray:
    """|s^{(k,j)} - y| for every enumerated pair, using the strict visit states."""
    errs = []
    total_sq = y.norm_sq()
    for k in c.params.blocks:
        table = _tuple_table(c, k)
        b = c.geometry.block(k)
        e = np.full(len(c.tuples[k]), total_sq)
        for r in range(b.R):
            idx = list(c.sks[k][r].net.indices)
            yl = np.array([y[r].value(i) for i in idx])
            # |s - y|^2 = |y|^2 - |y_lane|^2 + |s - y_lane|^2 on coordinate r
            e += np.where(
                table.present[:, r], np.sum((table.states[r] - yl) ** 2, axis=1) - yl @ yl, 0.0
            )
        errs.append(np.sqrt(np.maximum(e, 0.0)))
    return np.concatenate(errs)


@dataclass
class ThresholdTable:
    deltas: list[float]
    fractions: list[float]
    rows: list[dict] = field(default_factory=list)
    barrier: list[dict] = field(default_factory=list)
    a_trend_nonincreasing: bool = True

    def plotdata(self) -> str:
        return "".join(f"{d:.6g},{f:.6g}\n" for d, f in zip(self.deltas, self.fractions))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1, default=float)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()


DEFAULT_DELTAS = (0.05, 0.1, 0.2, 0.25, 0.3, 0.4, 0.45, 0.5, 0.6, 0.75, 0.9, 0.99)


def threshold_scan(
    c: Construction,
    corpus: Sequence[Target],
    deltas: Sequence[float] = DEFAULT_DELTAS,
    brute: bool = False,
    truncation_mode: str | None = None,
) -> ThresholdTable:
    rows, best = [], []
    for i, t in enumerate(corpus):
        if not t.in_coverage:
            continue
        eb = upper_experiment(t.y, c, truncation_mode)
        rel = eb.relative if eb.status == OK else math.inf
        if brute:
            rel = min(rel, float(_visit_errors(c, t.y).min()) / eb.norm_y)
        best.append(rel)
        rows.append({"index": i, "family": t.family, **eb.row(), "best_relative": rel})
    best_arr = np.array(best)
    fractions = [float(np.mean(best_arr <= d)) if len(best_arr) else 0.0 for d in deltas]

    barrier = []
    prev = math.inf
    trend = True
    for t in corpus:
        if t.family != "barrier":
            continue
        visits_best = float(_visit_errors(c, t.y).min()) / t.K
        for smp in lower_experiment(c.x.vector, t.K, c):
            barrier.append(asdict(smp) | {
                "relative_barrier": smp.relative_barrier,
                "relative_realized": smp.relative_realized,
                "best_visit_relative": visits_best,
            })
    for smp in lower_experiment(c.x.vector, 1.0, c):
        if abs(smp.a_n) > prev:
            trend = False
        prev = abs(smp.a_n)
    return ThresholdTable(list(deltas), fractions, rows, barrier, trend)


# ---------------------------------------------------------------------------
# lemma checks and batch runners


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)


def check_lane_oracle(c: Construction, n_windows: int = 200, max_len: int = 2000, seed: int = 0) -> Check:
    """lane_product against the step-by-step product of weight factors on random windows."""
    rng = np.random.default_rng([seed, 0x1A])
    s = c.schedule
    lanes = [(b.k, r) for b in c.geometry.blocks for r in range(b.R)]
    horizon = c.timeline.horizon
    bad = 0
    for _ in range(n_windows):
        k, r = lanes[int(rng.integers(len(lanes)))]
        j = c.geometry.block(k).lanes[r][0]
        a = int(rng.integers(0, horizon))
        b = min(horizon, a + int(rng.integers(0, max_len + 1)))
        direct = ONE
        for t in range(a + 1, b + 1):
            direct = direct * s.weight_action(t).factor(j)
        if direct != s.lane_product(k, r, a, b):
            bad += 1
    return Check("lane-oracle", bad == 0, {"windows": n_windows, "mismatches": bad})


def check_reset(c: Construction, a: float = 1.0, b: float = 1.0) -> Check:
    """Plane coefficients after b_k^(1) and b_k^(2) follow diag(1,2) then diag(1,1/2)."""
    from .orbit import reset_trace

    rows, ok = [], True
    for blk in c.geometry.blocks:
        b1, b2 = c.timeline.barriers[blk.k]
        plane = HVector.from_values({0: a, blk.m: b})
        u = ZVector({b1: plane, b2: plane})
        first, second = reset_trace(u, blk.k, c.schedule)
        want_first, want_second = (a, 2 * b), (a, b)
        good = first == want_first and second == want_second
        ok &= good
        rows.append({"k": blk.k, "first": first, "second": second, "ok": good})
    return Check("reset", ok, {"blocks": rows})


def check_net_bound(c: Construction, n_samples: int = 2000, seed: int = 0) -> Check:
    """|w - alpha u| <= 2 tau |w| and the magnitude quantization bound, for in-coverage w."""
    from .nets import quantization_bound

    rng = np.random.default_rng([seed, 0x2B])
    worst_dir = worst_mag = 0.0
    ok = True
    sks = [(k, sk) for k, lst in c.sks.items() for sk in lst]
    for _ in range(n_samples):
        k, sk = sks[int(rng.integers(len(sks)))]
        tau, J, M = c.params.tau_k(k), sk.grid.J, sk.grid.M
        w = _random_direction(rng, sk.net.dim, 2.0 ** rng.uniform(-M, M))
        point, m = discretize(w, sk.net, sk.grid)
        nw = float(np.linalg.norm(w))
        err = float(np.linalg.norm(w - sk.dense(point, m))) / nw
        mag = abs(2.0 ** (m / J) / nw - 1)
        worst_dir = max(worst_dir, err / (2 * tau))
        worst_mag = max(worst_mag, mag / quantization_bound(J))
        ok &= err <= 2 * tau and mag <= quantization_bound(J) * (1 + 1e-12)
    return Check("net-bound", ok, {"samples": n_samples, "worst_ratio": worst_dir, "worst_mag_ratio": worst_mag})


def check_norm_bound(c: Construction, n_samples: int = 200, seed: int = 0) -> Check:
    """sup |A_l| = 2 with barriers present, and |T u| <= 2 |u| on random sparse u."""
    from .orbit import apply_T

    rng = np.random.default_rng([seed, 0x3C])
    s = c.schedule
    sup = s.operator_norm_bound()
    ok = sup == (2.0 if c.timeline.barriers else sup)
    worst = 0.0
    horizon, dim = c.timeline.horizon, c.geometry.max_index + 2
    for _ in range(n_samples):
        pos = rng.choice(horizon, size=6, replace=False)
        u = ZVector({int(p): HVector.from_values({int(j): float(rng.normal()) for j in rng.choice(dim, 3)}) for p in pos})
        nu = u.norm()
        ratio = apply_T(u, s).norm() / nu
        worst = max(worst, ratio)
        ok &= ratio <= 2 + 1e-12
    return Check("norm-bound", ok, {"sup_weight_norm": sup, "worst_ratio": worst})


def check_visiting(c: Construction) -> Check:
    """Strict truncation: T^{n_{k,j}} x_{<=(k,j)} equals the visit state, exactly."""
    bad = []
    for k, j, n in c.timeline.visits:
        got = orbit_at(c.x.vector, n, c.schedule, max_position=c.x.last_position(k, j))
        if got != c.state(k, j):
            bad.append((k, j))
    return Check("visiting", not bad, {"pairs": len(c.timeline.visits), "mismatches": bad[:20]})


def check_norm_of_x(c: Construction) -> Check:
    """|x|^2 agrees with the provenance sum and stays below the certified bound."""
    direct = c.x.vector.norm_sq()
    prov = c.x.norm_sq_from_provenance(c.sks)
    bound = c.certified_norm_sq_bound()
    ok = abs(direct - prov) <= 1e-12 * prov and direct <= bound * (1 + 1e-12)
    return Check("x-norm", ok, {"norm_sq": direct, "provenance": prov, "bound": bound})


def lemma_suite(c: Construction, seed: int = 0) -> list[Check]:
    return [
        check_lane_oracle(c, seed=seed),
        check_reset(c),
        check_net_bound(c, seed=seed),
        check_norm_bound(c, seed=seed),
        check_visiting(c),
        check_norm_of_x(c),
    ]


_WORKER: dict = {}


def _worker_init(params_dict: dict):
    from .constructor import construct
    from .schedule import Params

    _WORKER["c"] = construct(Params.from_dict(params_dict))


def _worker_upper(args):
    y, mode = args
    return upper_experiment(y, _WORKER["c"], mode)


def run_upper(
    c: Construction, corpus: Sequence[Target], truncation_mode: str | None = None, jobs: int = 1
) -> list[ErrorBudget]:
    """upper_experiment over the in-coverage corpus, in corpus order."""
    ys = [t.y for t in corpus if t.in_coverage]
    if jobs <= 1:
        return [upper_experiment(y, c, truncation_mode) for y in ys]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(jobs, initializer=_worker_init, initargs=(c.params.to_dict(),)) as pool:
        return list(pool.map(_worker_upper, [(y, truncation_mode) for y in ys], chunksize=16))


def random_sparse(c: Construction, rng: np.random.Generator, n_coords: int = 8) -> ZVector:
    """A random sparse u with a couple of coordinates on barrier times."""
    horizon, dim = c.timeline.horizon, c.geometry.max_index + 2
    pos = set(int(p) for p in rng.choice(horizon, size=n_coords, replace=False))
    for b1, b2 in c.timeline.barriers.values():
        if rng.random() < 0.5:
            pos.add(b1 if rng.random() < 0.5 else b2)
    coords = {}
    for p in pos:
        idx = rng.choice(dim, size=int(rng.integers(1, 4)), replace=False)
        coords[p] = HVector.from_values({int(j): float(rng.normal()) for j in idx})
    return ZVector(coords)
