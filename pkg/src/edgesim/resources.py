"""Resource pool, leases and the greedy priority scheduler."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .allocation import AllocationError, AllocationItem, AllocationPlan, plan_for, solve_allocation
from .model import GradeSpec, TaskSpec, validate_task_spec


class PoolError(RuntimeError):
    pass


class SchedulerError(RuntimeError):
    pass


@dataclass
class GradeCapacity:
    bundles_total: int
    bundles_free: int
    phones_total: int
    phones_free: int


@dataclass(frozen=True)
class Lease:
    lease_id: int
    task_id: str
    holdings: tuple[tuple[str, int, int], ...]  # (grade_id, bundles, phones)
    issue_time: int = 0


class ResourcePool:
    """Per-grade bundle and phone counts with freeze/release bookkeeping."""

    def __init__(self, totals: Mapping[str, tuple[int, int]]):
        self._caps: dict[str, GradeCapacity] = {}
        for gid, (bundles, phones) in totals.items():
            if bundles < 0 or phones < 0:
                raise PoolError(f"negative capacity for grade {gid}")
            self._caps[gid] = GradeCapacity(bundles, bundles, phones, phones)
        self._leases: dict[int, Lease] = {}
        self._released: set[int] = set()
        self._next_id = 0

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ResourcePool":
        grades = d.get("grades")
        if not isinstance(grades, dict) or set(d) - {"grades"}:
            raise PoolError('pool file must look like {"grades": {"<id>": {"bundles": B, "phones": P}}}')
        totals = {}
        for gid, v in grades.items():
            if set(v) - {"bundles", "phones"}:
                raise PoolError(f"pool grade {gid}: unknown field")
            totals[gid] = (int(v.get("bundles", 0)), int(v.get("phones", 0)))
        return cls(totals)

    @classmethod
    def load(cls, path: str | Path) -> "ResourcePool":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def for_spec(cls, spec: TaskSpec) -> "ResourcePool":
        """Exactly the resources a spec declares: ``f`` bundles and ``m + q`` phones."""
        return cls({g.grade_id: (g.f, g.m + spec.demand[g.grade_id].q) for g in spec.grades})

    @property
    def grade_ids(self) -> list[str]:
        return list(self._caps)

    def capacity(self, grade_id: str) -> GradeCapacity:
        return replace(self._caps[grade_id])

    def snapshot(self) -> dict[str, tuple[int, int, int, int]]:
        return {g: (c.bundles_total, c.bundles_free, c.phones_total, c.phones_free)
                for g, c in self._caps.items()}

    @property
    def outstanding(self) -> list[Lease]:
        return list(self._leases.values())

    def freeze(self, task_id: str, holdings: Mapping[str, tuple[int, int]], now: int = 0) -> Lease:
        for gid, (b, p) in holdings.items():
            cap = self._caps.get(gid)
            if cap is None:
                raise PoolError(f"unknown grade {gid}")
            if b < 0 or p < 0 or b > cap.bundles_free or p > cap.phones_free:
                raise PoolError(f"cannot freeze {b} bundles / {p} phones of grade {gid}")
        for gid, (b, p) in holdings.items():
            self._caps[gid].bundles_free -= b
            self._caps[gid].phones_free -= p
        lease = Lease(self._next_id, task_id,
                      tuple((g, b, p) for g, (b, p) in holdings.items()), now)
        self._next_id += 1
        self._leases[lease.lease_id] = lease
        return lease

    def release(self, lease: Lease) -> None:
        if lease.lease_id in self._released:
            raise PoolError(f"lease {lease.lease_id} already released")
        if self._leases.get(lease.lease_id) != lease:
            raise PoolError(f"unknown lease {lease.lease_id}")
        del self._leases[lease.lease_id]
        self._released.add(lease.lease_id)
        for gid, b, p in lease.holdings:
            self._caps[gid].bundles_free += b
            self._caps[gid].phones_free += p

    def check(self) -> None:
        """Raise if free counts left [0, total] or leases disagree with them."""
        held: dict[str, list[int]] = {g: [0, 0] for g in self._caps}
        for lease in self._leases.values():
            for gid, b, p in lease.holdings:
                held[gid][0] += b
                held[gid][1] += p
        for gid, c in self._caps.items():
            if not (0 <= c.bundles_free <= c.bundles_total and 0 <= c.phones_free <= c.phones_total):
                raise PoolError(f"grade {gid} free counts out of range: {c}")
            if held[gid] != [c.bundles_total - c.bundles_free, c.phones_total - c.phones_free]:
                raise PoolError(f"grade {gid}: lease holdings disagree with free counts")


class TaskStatus(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


_ALLOWED = {
    TaskStatus.QUEUED: {TaskStatus.RUNNING},
    TaskStatus.RUNNING: {TaskStatus.COMPLETED, TaskStatus.FAILED},
}


@dataclass
class TaskRecord:
    spec: TaskSpec
    submit_seq: int
    status: TaskStatus = TaskStatus.QUEUED
    plan: AllocationPlan | None = None
    lease: Lease | None = None
    error: str | None = None
    report: Any = None

    def transition(self, new: TaskStatus) -> None:
        if new not in _ALLOWED.get(self.status, set()):
            raise SchedulerError(f"task {self.spec.task_id}: illegal transition {self.status.value} -> {new.value}")
        self.status = new


@dataclass(frozen=True)
class ScheduleDecision:
    task_id: str
    plan: AllocationPlan
    grades: tuple[GradeSpec, ...]  # f and m clamped to what was free
    lease: Lease


def plan_against(spec: TaskSpec, pool: ResourcePool) -> tuple[tuple[GradeSpec, ...], AllocationPlan, dict] | None:
    """Plan ``spec`` on currently free resources, or ``None`` if it does not fit.

    Declared ``f``/``m`` are clamped to free counts (bundles rounded down to
    whole devices); benchmarking phones must be free in full.
    """
    eff = []
    for g in spec.grades:
        if g.grade_id not in pool.grade_ids:
            return None
        d = spec.demand[g.grade_id]
        cap = pool.capacity(g.grade_id)
        if cap.phones_free < d.q:
            return None
        f = (min(g.f, cap.bundles_free) // g.k) * g.k
        m = min(g.m, cap.phones_free - d.q)
        eff.append(replace(g, f=f, m=m))
    items = [AllocationItem(g, spec.demand[g.grade_id].N, spec.demand[g.grade_id].q) for g in eff]
    try:
        if spec.allocation_override:
            base = solve_allocation(items)
            x = [spec.allocation_override.get(it.grade.grade_id, xi) for it, xi in zip(items, base.x)]
            plan = plan_for(items, x)
        else:
            plan = solve_allocation(items)
    except AllocationError:
        return None
    holdings = {}
    for it, x in zip(items, plan.x):
        bundles = min(it.slots, x) * it.grade.k
        phones = min(it.grade.m, it.open - x) + it.q
        holdings[it.grade.grade_id] = (bundles, phones)
    return tuple(eff), plan, holdings


class TaskManager:
    """Task queue plus greedy admission against a :class:`ResourcePool`."""

    def __init__(self, pool: ResourcePool):
        self.pool = pool
        self.records: dict[str, TaskRecord] = {}
        self._seq = 0

    def enqueue(self, spec: TaskSpec, base_dir: str | Path | None = None) -> TaskRecord:
        if spec.task_id in self.records:
            raise SchedulerError(f"duplicate task_id {spec.task_id}")
        problems = validate_task_spec(spec, self.pool, base_dir)
        if problems:
            raise SchedulerError(f"task {spec.task_id} failed validation: " + "; ".join(problems))
        rec = TaskRecord(spec, self._seq)
        self._seq += 1
        self.records[spec.task_id] = rec
        return rec

    def queued(self) -> list[TaskRecord]:
        recs = [r for r in self.records.values() if r.status is TaskStatus.QUEUED]
        return sorted(recs, key=lambda r: (-r.spec.priority, r.submit_seq))

    def tick_schedule(self, now: int = 0) -> list[ScheduleDecision]:
        """Admit every queued task that fits, highest priority first; skip the rest."""
        out = []
        for rec in self.queued():
            fitted = plan_against(rec.spec, self.pool)
            if fitted is None:
                continue
            grades, plan, holdings = fitted
            lease = self.pool.freeze(rec.spec.task_id, holdings, now)
            rec.transition(TaskStatus.RUNNING)
            rec.plan = plan
            rec.lease = lease
            out.append(ScheduleDecision(rec.spec.task_id, plan, grades, lease))
        return out

    def finish(self, task_id: str, ok: bool, error: str | None = None) -> TaskRecord:
        rec = self.records[task_id]
        rec.transition(TaskStatus.COMPLETED if ok else TaskStatus.FAILED)
        rec.error = error
        if rec.lease is not None:
            self.pool.release(rec.lease)
        return rec


def tick_schedule(manager: TaskManager, now: int = 0) -> list[ScheduleDecision]:
    return manager.tick_schedule(now)
