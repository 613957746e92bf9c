"""Orbit evaluation for the weighted shift T(u)_r = A_{r+1} u_{r+1}.

``orbit_at`` uses (T^n u)_r = A_{r+1} ... A_{r+n} u_{r+n}: every weight is
diagonal, so each stored coefficient just picks up the lane product of its
lane over (r, r+n] and the barrier factors of its plane.  ``apply_T`` is the
one-step reference used to check it.
"""
from __future__ import annotations

from bisect import bisect_left, bisect_right

import numpy as np

from .schedule import Schedule
from .space import ONE, DyadicScalar, HVector, ZVector, project_plane


def apply_T(u: ZVector, schedule: Schedule) -> ZVector:
    out = {}
    for p, v in u.coords.items():
        if p == 0:
            continue
        w = schedule.weight_action(p).apply(v)
        if w:
            out[p - 1] = w
    return ZVector(out)


def _index_maps(schedule: Schedule) -> tuple[dict[int, tuple[int, int]], dict[int, int]]:
    cached = getattr(schedule, "_index_maps", None)
    if cached is None:
        g = schedule.geometry
        lanes = {j: g.lane_of(j) for j in range(1, g.max_index + 1)}
        planes = {b.m: b.k for b in g.blocks}
        cached = (lanes, planes)
        schedule._index_maps = cached
    return cached


def entry_factor(schedule: Schedule, j: int, a: int, b: int) -> DyadicScalar:
    """Multiplier A_{a+1} ... A_b applies to the coefficient of e_j."""
    lanes, planes = _index_maps(schedule)
    lane = lanes.get(j)
    if lane is None:
        return ONE
    k, r = lane
    steps = schedule.program.window_steps(k, r, a, b)
    c = schedule.barrier_exponent(planes[j], a, b) if j in planes else 0
    if not steps and not c:
        return ONE
    den = schedule.program.den[k]
    return DyadicScalar(steps + c * den, den)


def orbit_at(u: ZVector, n: int, schedule: Schedule, max_position: int | None = None) -> ZVector:
    """T^n u; with ``max_position`` set, T^n of u restricted to positions <= max_position."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    positions = u.positions
    hi = len(positions) if max_position is None else bisect_right(positions, max_position)
    if n == 0:
        return u if hi == len(positions) else u.restrict_positions(lambda p: p <= max_position)
    out = {}
    for p in positions[bisect_left(positions, n):hi]:
        r = p - n
        v = u.coords[p]
        entries = {}
        for j, (m, s) in v.entries.items():
            f = entry_factor(schedule, j, r, p)
            entries[j] = (m, s * f) if not f.is_one() else (m, s)
        out[r] = HVector(entries)
    return ZVector(out)


def reset_trace(u: ZVector, k: int, schedule: Schedule) -> tuple[tuple[float, float], tuple[float, float]]:
    """Plane coefficients (e_0, e_{m_k}) of (T^n u)_0 at n = b_k^(1) and n = b_k^(2)."""
    g = schedule.geometry
    g.block(k)
    b1, b2 = schedule.timeline.barriers[k]
    first = project_plane(orbit_at(u, b1, schedule)[0], k, g)
    second = project_plane(orbit_at(u, b2, schedule)[0], k, g)
    return first, second


def orbit_norm_sq(
    u: ZVector, n: int, schedule: Schedule, min_position: int = 0, max_position: int | None = None
) -> float:
    """||T^n u'||^2 where u' keeps the positions of u in [max(n, min_position), max_position].

    Vectorized float evaluation; used where only the size of a far-away part
    of the orbit matters.
    """
    pos, idx, mant, expo = u.flat
    lo = max(n, min_position)
    sel = pos >= lo
    if max_position is not None:
        sel &= pos <= max_position
    if not sel.any():
        return 0.0
    pos, idx, mant, expo = pos[sel], idx[sel], mant[sel], expo[sel].copy()
    start = pos - n
    lanes, planes = _index_maps(schedule)
    prog = schedule.program
    for (k, r), (times, _, cum) in prog._index.items():
        members = [j for j, lr in lanes.items() if lr == (k, r)]
        mask = np.isin(idx, members)
        if mask.any():
            hi = cum[np.searchsorted(times, pos[mask], side="right")]
            lo_ = cum[np.searchsorted(times, start[mask], side="right")]
            expo[mask] += (hi - lo_) / prog.den[k]
    for m, k in planes.items():
        mask = idx == m
        if mask.any() and k in schedule.timeline.barriers:
            b1, b2 = schedule.timeline.barriers[k]
            a, b = start[mask], pos[mask]
            expo[mask] += ((a < b1) & (b1 <= b)).astype(float) - ((a < b2) & (b2 <= b)).astype(float)
    top = float(np.floor(expo.max()))
    vals = mant * np.exp2(expo - top)
    return float(np.sum(vals * vals)) * 4.0**top
