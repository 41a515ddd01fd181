"""Sorter, shelves, capacity pacing and the per-task dispatcher.

A *dispatch* is the strategy releasing messages from a shelf. Survivors
of dropout are then paced at ``capacity_per_sec`` and reach the cloud as
*receive* events, so a dispatch burst above capacity spills into the
following instants.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict, deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..engine import Engine
from .compile import CompiledDispatchPlan, compile_time_interval, plan_from_time_points
from .strategy import ABSOLUTE, DispatchStrategySpec, RealTimeAccumulated, TimeInterval, TimePoint

log = logging.getLogger(__name__)


@dataclass(slots=True)
class ShelfMessage:
    task_id: str
    round: int
    device_id: int
    grade: str
    sample_count: int
    payload_ref: str | None
    emit_time: int

    @property
    def key(self) -> tuple[str, int, int]:
        return self.task_id, self.round, self.device_id


class Shelf:
    """FIFO of pending messages for one task."""

    def __init__(self, task_id: str):
        self.task_id = task_id
        self._q: deque[ShelfMessage] = deque()
        self._seen: set[tuple[int, int]] = set()

    def __len__(self) -> int:
        return len(self._q)

    def push(self, msg: ShelfMessage) -> bool:
        key = (msg.round, msg.device_id)
        if key in self._seen:
            return False
        self._seen.add(key)
        self._q.append(msg)
        return True

    def take(self, n: int) -> list[ShelfMessage]:
        q = self._q
        n = min(n, len(q))
        return [q.popleft() for _ in range(n)]

    def by_round(self) -> Counter:
        return Counter(m.round for m in self._q)


class Sorter:
    """Routes incoming messages to the shelf of their task."""

    def __init__(self):
        self.shelves: dict[str, Shelf] = {}
        self.duplicates: list[tuple[str, int, int]] = []

    def shelf(self, task_id: str) -> Shelf:
        if task_id not in self.shelves:
            self.shelves[task_id] = Shelf(task_id)
        return self.shelves[task_id]

    def sort_incoming(self, msg: ShelfMessage) -> str | None:
        """Shelf id for the message, or ``None`` if it was a duplicate."""
        if not self.shelf(msg.task_id).push(msg):
            self.duplicates.append(msg.key)
            log.warning("duplicate message %s rejected", msg.key)
            return None
        return msg.task_id


def apply_dropout(messages: Sequence, p_fail: float, discard_count: int,
                  rng: np.random.Generator) -> tuple[list, list]:
    """Bernoulli failure per message, then ``discard_count`` uniform removals.

    Both parts keep the input order. ``discard_count`` is clamped to what
    survives the Bernoulli stage.
    """
    n = len(messages)
    if n == 0:
        return [], []
    keep = np.ones(n, dtype=bool)
    if p_fail > 0.0:
        keep = rng.random(n) >= p_fail
    if discard_count > 0:
        alive = np.flatnonzero(keep)
        k = min(discard_count, len(alive))
        if k < discard_count:
            log.info("discard count %d clamped to %d", discard_count, k)
        if k:
            keep[rng.choice(alive, size=k, replace=False)] = False
    delivered = [m for m, ok in zip(messages, keep) if ok]
    dropped = [m for m, ok in zip(messages, keep) if not ok]
    return delivered, dropped


class Pacer:
    """Spaces sends ``1000 / capacity`` ms apart on an integer-ms clock.

    Internally time is counted in units of ``1 / capacity`` ms, so message
    slots are exactly 1000 units apart and any 1000 ms window holds at most
    ``capacity`` sends.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self._next = 0  # earliest unit for the next send

    def send_times(self, release: int, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0, dtype=np.int64)
        c = self.capacity
        start = max(release * c, self._next)
        units = start + 1000 * np.arange(n, dtype=np.int64)
        self._next = int(units[-1]) + 1000
        return -(-units // c)


# trace(t, event, count, device_id, round)
TraceFn = Callable[[int, str, int, object, object], None]


class Dispatcher:
    """Executes one task's strategy against its shelf."""

    def __init__(self, task_id: str, shelf: Shelf, strategy: DispatchStrategySpec, engine: Engine,
                 deliver: Callable[[ShelfMessage, int], None], rng: np.random.Generator,
                 trace: TraceFn | None = None):
        self.task_id = task_id
        self.shelf = shelf
        self.strategy = strategy
        self.engine = engine
        self.deliver = deliver
        self.rng = rng
        self.trace = trace or (lambda *a: None)
        self.pacer = Pacer(strategy.capacity_per_sec)
        self._cursor = 0
        self.last_send = 0
        self.inflight: Counter = Counter()
        self.dispatched: Counter = Counter()
        self.delivered: Counter = Counter()
        self.dropped: Counter = Counter()
        self.shortfalls: list[tuple[int, int, int]] = []
        self.plans: dict[int, CompiledDispatchPlan] = {}
        self.plan_base: dict[int, int] = {}

    # -- real-time accumulated ----------------------------------------------

    @property
    def threshold(self) -> int:
        s = self.strategy
        return s.thresholds[self._cursor % len(s.thresholds)]

    def on_shelved(self, now: int) -> None:
        s = self.strategy
        if not isinstance(s, RealTimeAccumulated):
            return
        while len(self.shelf) >= self.threshold:
            batch = self.shelf.take(self.threshold)
            self._cursor += 1
            self._release(batch, now, s.p_fail, 0)

    def flush(self, now: int) -> int:
        """Send whatever is still shelved (task completion)."""
        batch = self.shelf.take(len(self.shelf))
        if batch:
            p = self.strategy.p_fail if isinstance(self.strategy, RealTimeAccumulated) else 0.0
            self._release(batch, now, p, 0, event="flush")
        return len(batch)

    # -- rule based -----------------------------------------------------------

    def compile(self, pending: int) -> CompiledDispatchPlan:
        s = self.strategy
        if isinstance(s, TimeInterval):
            return compile_time_interval(s, pending)
        if isinstance(s, TimePoint):
            return plan_from_time_points(s)
        raise TypeError("real-time strategies have no plan")

    def run_round(self, rnd: int, now: int, done: Callable[[int], None]) -> None:
        """Execute the round's plan from ``now``; ``done(t)`` fires once the last send lands."""
        plan = self.compile(len(self.shelf))
        base = 0 if self.strategy.time_base == ABSOLUTE else now
        self.plans[rnd] = plan
        self.plan_base[rnd] = base
        if not plan.points:
            self.engine.schedule(now, lambda _: done(self.engine.now))
            return
        last = len(plan.points) - 1
        for i, point in enumerate(plan.points):
            at = max(now, base + point.fire_time)
            self.engine.schedule(at, self._fire, (point, done if i == last else None))

    def _fire(self, payload) -> None:
        point, done = payload
        now = self.engine.now
        batch = self.shelf.take(point.count)
        if len(batch) < point.count:
            self.shortfalls.append((now, point.count, len(batch)))
            log.info("task %s: shortfall at %d ms (%d of %d)", self.task_id, now,
                     len(batch), point.count)
        self._release(batch, now, point.dropout.p_fail, point.dropout.discard)
        if done is not None:
            self.engine.schedule(max(now, self.last_send), lambda _: done(self.engine.now))

    # -- shared ---------------------------------------------------------------

    def _release(self, batch: list[ShelfMessage], now: int, p_fail: float, discard: int,
                 event: str = "dispatch") -> None:
        if not batch:
            return
        per_round = Counter(m.round for m in batch)
        for rnd in sorted(per_round):
            self.trace(now, event, per_round[rnd], None, rnd)
            self.dispatched[rnd] += per_round[rnd]
        delivered, dropped = apply_dropout(batch, p_fail, discard, self.rng)
        for m in dropped:
            self.dropped[m.round] += 1
            self.trace(now, "drop", 1, m.device_id, m.round)
        if not delivered:
            return
        times = self.pacer.send_times(now, len(delivered))
        self.last_send = max(self.last_send, int(times[-1]))
        groups: dict[int, list[ShelfMessage]] = defaultdict(list)
        for m, t in zip(delivered, times.tolist()):
            groups[t].append(m)
            self.inflight[m.round] += 1
        for t, msgs in groups.items():
            self.engine.schedule(t, self._receive, msgs)

    def _receive(self, msgs: list[ShelfMessage]) -> None:
        now = self.engine.now
        for m in msgs:
            self.inflight[m.round] -= 1
            self.delivered[m.round] += 1
            self.trace(now, "receive", 1, m.device_id, m.round)
            self.deliver(m, now)
