"""Hybrid device allocation between logical simulation and phone devices.

For each grade ``i`` we choose ``x_i`` devices for logical simulation; the
remaining ``N_i - q_i - x_i`` run on phones. Durations (integer ms)::

    T_l = max_i ceil(k_i * x_i / f_i) * alpha_i
    T_p = max_i ceil((N_i - q_i - x_i) / m_i) * beta_i + lambda_i
    T   = max(T_l, T_p)

``f_i`` enters as its usable part ``floor(f_i / k_i) * k_i`` (a device
cannot straddle bundle groups), which is the literal formula whenever
``f_i`` is a multiple of ``k_i``. A grade with nothing to run on phones
contributes 0 to ``T_p`` rather than ``lambda_i``.

The solver minimises ``T`` and, among minimisers, maximises ``sum(x)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import GradeSpec

BRUTE_FORCE_GUARD = 10**7


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationItem:
    grade: GradeSpec
    N: int
    q: int

    @property
    def open(self) -> int:
        """Devices left after reserving benchmarking phones (``N - q``)."""
        return self.N - self.q

    @property
    def slots(self) -> int:
        return self.grade.f // self.grade.k


AllocationInput = Sequence[AllocationItem]


@dataclass(frozen=True)
class AllocationPlan:
    grade_ids: tuple[str, ...]
    x: tuple[int, ...]
    t_logical: int
    t_device: int
    t_total: int

    def logical(self, grade_id: str) -> int:
        return self.x[self.grade_ids.index(grade_id)]

    def to_dict(self) -> dict:
        return {
            "x": {g: v for g, v in zip(self.grade_ids, self.x)},
            "t_logical_ms": self.t_logical,
            "t_device_ms": self.t_device,
            "t_total_ms": self.t_total,
        }


def items_from(grades: Sequence[GradeSpec], demand) -> list[AllocationItem]:
    return [AllocationItem(g, demand[g.grade_id].N, demand[g.grade_id].q) for g in grades]


def logical_term(grade: GradeSpec, x: int) -> int:
    if x == 0:
        return 0
    usable = (grade.f // grade.k) * grade.k
    if usable < grade.k:
        raise AllocationError(f"no logical capacity for grade {grade.grade_id}")
    return -(-grade.k * x // usable) * grade.alpha


def device_term(grade: GradeSpec, n_device: int) -> int:
    if n_device == 0:
        return 0
    if grade.m < 1:
        raise AllocationError(f"no phone capacity for grade {grade.grade_id}")
    return -(-n_device // grade.m) * grade.beta + grade.lam


def logical_duration(grades: Sequence[GradeSpec], x: Sequence[int]) -> int:
    return max((logical_term(g, xi) for g, xi in zip(grades, x)), default=0)


def device_duration(items: AllocationInput, x: Sequence[int]) -> int:
    return max((device_term(it.grade, it.open - xi) for it, xi in zip(items, x)), default=0)


def plan_for(items: AllocationInput, x: Sequence[int]) -> AllocationPlan:
    x = tuple(int(v) for v in x)
    for it, xi in zip(items, x):
        if not 0 <= xi <= it.open:
            raise AllocationError(
                f"x={xi} outside [0, {it.open}] for grade {it.grade.grade_id}")
    t_l = logical_duration([it.grade for it in items], x)
    t_p = device_duration(items, x)
    return AllocationPlan(tuple(it.grade.grade_id for it in items), x, t_l, t_p, max(t_l, t_p))


def _check_hostable(it: AllocationItem) -> None:
    if it.N < 0 or it.q < 0 or it.q > it.N:
        raise AllocationError(f"invalid demand for grade {it.grade.grade_id}: N={it.N}, q={it.q}")
    if it.open > 0 and it.slots < 1 and it.grade.m < 1:
        raise AllocationError(f"grade {it.grade.grade_id} unhostable")


def _feasible_range(it: AllocationItem) -> tuple[int, int]:
    lo = 0 if it.grade.m >= 1 else it.open
    hi = it.open if it.slots >= 1 else 0
    return lo, hi


def _grade_optimum(it: AllocationItem) -> int:
    """Smallest achievable ``max(term_l, term_d)`` for one grade."""
    lo, hi = _feasible_range(it)
    g = it.grade

    def cost(x: int) -> int:
        return max(logical_term(g, x), device_term(g, it.open - x))

    # term_l is nondecreasing and term_d nonincreasing in x: find the first x
    # where term_l >= term_d; the optimum is there or just before it.
    a, b = lo, hi
    while a < b:
        mid = (a + b) // 2
        if logical_term(g, mid) >= device_term(g, it.open - mid):
            b = mid
        else:
            a = mid + 1
    best = cost(a)
    if a > lo:
        best = min(best, cost(a - 1))
    return best


def solve_allocation(items: AllocationInput) -> AllocationPlan:
    """Minimise ``T``; among minimisers take the largest ``x`` in every grade.

    Under a max objective the grades decouple: ``T*`` is the largest of the
    per-grade optima, and each grade can then push ``x_i`` up to the point
    where its logical term would exceed ``T*``.
    """
    for it in items:
        _check_hostable(it)
    if not items:
        return AllocationPlan((), (), 0, 0, 0)
    t_star = max(_grade_optimum(it) for it in items)
    x = []
    for it in items:
        _, hi = _feasible_range(it)
        if hi == 0:
            x.append(0)
            continue
        # ceil(x / slots) * alpha <= T*  <=>  x <= slots * floor(T* / alpha)
        x.append(min(hi, it.slots * (t_star // it.grade.alpha)))
    plan = plan_for(items, x)
    assert plan.t_total == t_star, (plan, t_star)
    return plan


def _term_tables(it: AllocationItem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-x logical and device terms for every x in [0, N-q]; infeasible x masked."""
    xs = np.arange(it.open + 1, dtype=np.int64)
    g = it.grade
    usable = (g.f // g.k) * g.k
    ok = np.ones(xs.shape, dtype=bool)
    if usable >= g.k:
        term_l = -(-(g.k * xs) // usable) * g.alpha
    else:
        term_l = np.zeros_like(xs)
        ok &= xs == 0
    n_dev = it.open - xs
    if g.m >= 1:
        term_d = np.where(n_dev > 0, -(-n_dev // g.m) * g.beta + g.lam, 0)
    else:
        term_d = np.zeros_like(xs)
        ok &= n_dev == 0
    return term_l, term_d, ok


def brute_force_allocation(items: AllocationInput) -> AllocationPlan:
    """Exhaustive search over every integer x vector.

    Resolution order: min ``T``, then max ``sum(x)``, then the
    lexicographically largest ``x`` in grade order.
    """
    for it in items:
        _check_hostable(it)
    if not items:
        return AllocationPlan((), (), 0, 0, 0)
    size = math.prod(it.open + 1 for it in items)
    if size > BRUTE_FORCE_GUARD:
        raise AllocationError(f"search space {size} exceeds guard {BRUTE_FORCE_GUARD}")
    c = len(items)
    t_l = np.zeros((1,) * c, dtype=np.int64)
    t_p = np.zeros((1,) * c, dtype=np.int64)
    feasible = np.ones((1,) * c, dtype=bool)
    total = np.zeros((1,) * c, dtype=np.int64)
    for axis, it in enumerate(items):
        shape = [1] * c
        shape[axis] = it.open + 1
        term_l, term_d, ok = _term_tables(it)
        t_l = np.maximum(t_l, term_l.reshape(shape))
        t_p = np.maximum(t_p, term_d.reshape(shape))
        feasible = feasible & ok.reshape(shape)
        total = total + np.arange(it.open + 1).reshape(shape)
    t_total = np.where(feasible, np.maximum(t_l, t_p), np.iinfo(np.int64).max)
    best_t = t_total.min()
    cand = t_total == best_t
    best_sum = np.where(cand, total, -1).max()
    winners = np.argwhere(cand & (total == best_sum))
    x = max(tuple(int(v) for v in row) for row in winners)
    return plan_for(items, x)


def ratio_allocation(items: AllocationInput, ratio: float) -> AllocationPlan:
    """Fixed split: ``x_i = round_half_up(ratio * (N_i - q_i))``."""
    if not 0.0 <= ratio <= 1.0:
        raise AllocationError(f"ratio {ratio} outside [0, 1]")
    x = [math.floor(ratio * it.open + 0.5) for it in items]
    return plan_for(items, x)


def enumerate_plans(items: AllocationInput):
    """Yield every feasible plan (small instances only; used by tests)."""
    ranges = [range(it.open + 1) for it in items]
    for x in itertools.product(*ranges):
        try:
            yield plan_for(items, x)
        except AllocationError:
            continue
