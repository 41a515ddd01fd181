"""Turn strategies into explicit (fire_time, count) plans."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .strategy import Dropout, StrategyError, TimeInterval, TimePoint

log = logging.getLogger(__name__)

SUBSAMPLES = 128
DEFAULT_STEP_MS = 1000
MIN_STEP_MS = 100

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class PlanPoint:
    fire_time: int  # ms, relative to the plan's time base
    count: int
    dropout: Dropout = Dropout()


@dataclass(frozen=True)
class CompiledDispatchPlan:
    points: tuple[PlanPoint, ...]
    total: int
    step: int | None = None
    # unrounded per-step share M * AUC_j / AUC_total (time-interval plans only)
    target: tuple[float, ...] | None = None

    @property
    def fire_times(self) -> list[int]:
        return [p.fire_time for p in self.points]

    @property
    def counts(self) -> list[int]:
        return [p.count for p in self.points]


def largest_remainder(total: int, weights: Sequence[float]) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Floors every quota, then hands the leftover units to the largest
    fractional parts; equal parts go to the earlier index.
    """
    w = np.asarray(weights, dtype=float)
    if total == 0 or len(w) == 0:
        return np.zeros(len(w), dtype=np.int64)
    s = w.sum()
    if s <= 0:
        raise StrategyError("cannot apportion over zero total weight")
    quota = total * w / s
    base = np.floor(quota).astype(np.int64)
    left = int(total - base.sum())
    if left < 0:  # float round-up of a quota; take back from the smallest parts
        order = np.argsort(quota - base, kind="stable")
        for i in order:
            if left == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                left += 1
    order = np.argsort(-(quota - base), kind="stable")
    base[order[:left]] += 1
    return base


def step_edges(duration: int, step: int) -> np.ndarray:
    n = -(-duration // step)
    return np.minimum(np.arange(n + 1, dtype=np.int64) * step, duration)


def step_auc(spec: TimeInterval, step: int, subsamples: int = SUBSAMPLES) -> np.ndarray:
    """Area under the rate function for each step of the mapped interval.

    Step ``[t_j, t_j+1)`` ms maps affinely to ``a + (b - a) * t / duration``;
    each area is a composite trapezoid over ``subsamples`` pieces.
    """
    a, b = spec.domain
    edges = step_edges(spec.duration, step)
    frac = np.linspace(0.0, 1.0, subsamples + 1)
    t = edges[:-1, None] + (edges[1:] - edges[:-1])[:, None] * frac[None, :]
    # the affine map can overshoot b by an ulp, which would fall outside the last segment
    u = np.clip(a + (b - a) * t / spec.duration, min(a, b), max(a, b))
    y = spec.rate_fn(u)
    return _trapezoid(y, u, axis=1)


def compile_time_interval(spec: TimeInterval, pending: int) -> CompiledDispatchPlan:
    """Discretise the rate curve into per-step counts summing to ``pending``.

    Steps start at 1 s and halve (floor 100 ms) while some step would carry
    more than ``capacity * step`` messages; anything still above capacity
    spills over at execution time.
    """
    if pending < 0:
        raise StrategyError("pending count must be >= 0")
    if pending == 0:
        return CompiledDispatchPlan((), 0, DEFAULT_STEP_MS, ())
    step = DEFAULT_STEP_MS
    while True:
        auc = step_auc(spec, step)
        total = auc.sum()
        if not np.isfinite(total) or (auc < 0).any():
            raise StrategyError("rate function is unbounded or negative")
        if total <= 0:
            raise StrategyError("degenerate rate function: zero area under the curve")
        counts = largest_remainder(pending, auc)
        if step > MIN_STEP_MS and (counts * 1000 > spec.capacity_per_sec * step).any():
            step = max(MIN_STEP_MS, step // 2)
            log.info("time_interval step halved to %d ms", step)
            continue
        break
    edges = step_edges(spec.duration, step)
    points = tuple(PlanPoint(spec.start + int(edges[j]), int(c), spec.dropout)
                   for j, c in enumerate(counts))
    target = tuple(float(v) for v in pending * auc / total)
    return CompiledDispatchPlan(points, pending, step, target)


def plan_from_time_points(spec: TimePoint) -> CompiledDispatchPlan:
    pts = sorted(spec.points, key=lambda p: p.t)
    for prev, cur in zip(pts, pts[1:]):
        if cur.t == prev.t:
            raise StrategyError(f"duplicate time point at {cur.t} ms")
    points = tuple(PlanPoint(p.t, p.count, p.dropout) for p in pts)
    return CompiledDispatchPlan(points, sum(p.count for p in pts))
