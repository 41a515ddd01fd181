"""Discrete-event kernel: integer-millisecond virtual clock, event heap and
seeded random streams.

Every stochastic choice in a run draws from a stream derived from
``(task seed, purpose label, id)``. The derivation is fixed project-wide::

    SeedSequence([seed, blake2b64(label), id]) -> PCG64 -> numpy Generator

and is recorded in every trace header as :data:`RNG_ID`.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

RNG_ID = "numpy-PCG64/SeedSequence[seed,blake2b64(label),id]"

_MASK64 = (1 << 64) - 1

Handler = Callable[[Any], None]


def to_ms(seconds: float) -> int:
    """Convert a decimal seconds value to integer milliseconds (half away from zero)."""
    ms = abs(seconds) * 1000.0
    whole = int(ms + 0.5)
    return whole if seconds >= 0 else -whole


def to_seconds(ms: int) -> float:
    return ms / 1000.0


def label_key(label: str) -> int:
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, label: str, ident: int = 0) -> np.random.Generator:
    """Independent generator for one ``(seed, label, ident)`` derivation tuple."""
    if ident < 0:
        raise ValueError("stream id must be non-negative")
    seq = np.random.SeedSequence([seed & _MASK64, label_key(label), ident])
    return np.random.Generator(np.random.PCG64(seq))


class EngineError(RuntimeError):
    """A handler raised; ``event`` identifies the offending event."""

    def __init__(self, message: str, event: "Event | None" = None):
        super().__init__(message)
        self.event = event


@dataclass(frozen=True)
class Event:
    fire_time: int
    seq: int
    target: Handler
    payload: Any = None


@dataclass(frozen=True)
class RunStats:
    processed: int
    now: int


class Engine:
    """Single-threaded event loop over integer-millisecond virtual time.

    Events fire in ``(fire_time, seq)`` order where ``seq`` is assigned at
    scheduling time, so same-time events fire in scheduling order.
    """

    def __init__(self, start: int = 0):
        self._now = int(start)
        self._heap: list[tuple[int, int, Handler, Any]] = []
        self._seq = 0
        self.processed = 0

    @property
    def now(self) -> int:
        return self._now

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, at: int, handler: Handler, payload: Any = None) -> int:
        at = int(at)
        if at < self._now:
            raise EngineError(f"cannot schedule at t={at} ms, clock is already at {self._now} ms")
        seq = self._seq
        self._seq += 1
        heapq.heappush(self._heap, (at, seq, handler, payload))
        return seq

    def schedule_in(self, delay: int, handler: Handler, payload: Any = None) -> int:
        return self.schedule(self._now + delay, handler, payload)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_until(self, t_end: int | None = None) -> RunStats:
        """Process every event with ``fire_time <= t_end`` (all events when ``None``).

        With a finite ``t_end`` the clock finishes at ``t_end`` even if the
        queue drained earlier.
        """
        heap = self._heap
        count = 0
        pop = heapq.heappop
        while heap and (t_end is None or heap[0][0] <= t_end):
            at, seq, handler, payload = pop(heap)
            self._now = at
            try:
                handler(payload)
            except EngineError:
                raise
            except Exception as exc:
                event = Event(at, seq, handler, payload)
                name = getattr(handler, "__qualname__", repr(handler))
                raise EngineError(f"handler {name} failed at t={at} ms (event seq {seq}): {exc}",
                                  event) from exc
            count += 1
        if t_end is not None and t_end > self._now:
            self._now = int(t_end)
        self.processed += count
        return RunStats(processed=count, now=self._now)
