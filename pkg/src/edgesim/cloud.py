"""Cloud side: buffer dispatched messages, trigger aggregation, run FedAvg."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence, Union

import numpy as np

from .engine import to_ms
from .fl import ModelParams

log = logging.getLogger(__name__)


class TriggerError(ValueError):
    pass


@dataclass(frozen=True)
class SampleThreshold:
    samples: int

    def __post_init__(self):
        if self.samples < 1:
            raise TriggerError("sample_threshold: samples must be >= 1")


@dataclass(frozen=True)
class Scheduled:
    period: int  # ms

    def __post_init__(self):
        if self.period <= 0:
            raise TriggerError("scheduled: period must be positive")


AggregationTrigger = Union[SampleThreshold, Scheduled]


def trigger_from_dict(d: dict) -> AggregationTrigger:
    if not isinstance(d, dict) or "type" not in d:
        raise TriggerError("aggregation_trigger: missing required field 'type'")
    kind = d["type"]
    if kind == "sample_threshold":
        if set(d) - {"type", "samples"}:
            raise TriggerError(f"sample_threshold: unknown field '{sorted(set(d) - {'type', 'samples'})[0]}'")
        if "samples" not in d:
            raise TriggerError("sample_threshold: missing required field 'samples'")
        return SampleThreshold(int(d["samples"]))
    if kind == "scheduled":
        if set(d) - {"type", "period_s"}:
            raise TriggerError(f"scheduled: unknown field '{sorted(set(d) - {'type', 'period_s'})[0]}'")
        if "period_s" not in d:
            raise TriggerError("scheduled: missing required field 'period_s'")
        return Scheduled(to_ms(float(d["period_s"])))
    raise TriggerError(f"unknown aggregation trigger '{kind}'")


def trigger_to_dict(t: AggregationTrigger) -> dict:
    if isinstance(t, SampleThreshold):
        return {"type": "sample_threshold", "samples": t.samples}
    return {"type": "scheduled", "period_s": t.period / 1000.0}


def fedavg_aggregate(buffered: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-weighted mean ``sum(n_k / n) * w_k``.

    All-zero sample counts fall back to the unweighted mean.
    """
    if not buffered:
        raise ValueError("nothing to aggregate")
    dims = {p.dim for p, _ in buffered}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch among client params: {sorted(dims)}")
    counts = np.array([n for _, n in buffered], dtype=float)
    if counts.sum() <= 0:
        log.warning("all sample counts are zero; using the unweighted mean")
        counts = np.ones_like(counts)
    weights = counts / counts.sum()
    W = np.stack([p.weights for p, _ in buffered])
    b = np.array([p.bias for p, _ in buffered])
    return ModelParams(weights @ W, float(weights @ b))


@dataclass(frozen=True)
class HistoryEntry:
    version: int
    t_ms: int
    messages: int
    samples: int
    train_acc: float | None = None
    loss: float | None = None
    test_acc: float | None = None
    flush: bool = False


@dataclass
class GlobalModel:
    params: ModelParams | None
    version: int = 0
    history: list[HistoryEntry] = field(default_factory=list)


# evaluator(params, contributing device ids) -> (train_acc, loss, test_acc)
Evaluator = Callable[[ModelParams, list[int]], tuple[float | None, float | None, float | None]]


class CloudService:
    """One task's aggregation service.

    ``store`` maps payload refs to ``ModelParams`` (or ``None`` for flows
    that produce no model). ``on_event(t, kind, count, device_id, round)``
    mirrors aggregations into the traffic trace.
    """

    def __init__(self, trigger: AggregationTrigger, store: dict[str, Any],
                 params: ModelParams | None = None, evaluator: Evaluator | None = None,
                 on_event: Callable[..., None] | None = None):
        self.trigger = trigger
        self.store = store
        self.model = GlobalModel(params)
        self.evaluator = evaluator
        self.on_event = on_event
        self.buffer: list[tuple[Any, int, int]] = []  # (params or None, samples, device_id)
        self.buffered_samples = 0
        self.received = 0
        self.corrupt = 0

    def receive_message(self, msg, now: int) -> None:
        ref = msg.payload_ref
        if ref is not None and ref not in self.store:
            self.corrupt += 1
            log.warning("dangling payload ref %s from device %s", ref, msg.device_id)
            return
        params = self.store.get(ref) if ref is not None else None
        self.buffer.append((params, msg.sample_count, msg.device_id))
        self.buffered_samples += msg.sample_count
        self.received += 1
        if isinstance(self.trigger, SampleThreshold):
            self.maybe_aggregate(now)

    def maybe_aggregate(self, now: int, at_boundary: bool = False) -> HistoryEntry | None:
        """Fire if the trigger condition holds; consumes the whole buffer."""
        if isinstance(self.trigger, SampleThreshold):
            if self.buffered_samples < self.trigger.samples:
                return None
        elif not at_boundary or not self.buffer:
            return None
        return self._aggregate(now)

    def flush(self, now: int) -> HistoryEntry | None:
        """End-of-task aggregation over any leftovers (flagged in history)."""
        if not self.buffer:
            return None
        return self._aggregate(now, flush=True)

    def _aggregate(self, now: int, flush: bool = False) -> HistoryEntry:
        buffered, self.buffer = self.buffer, []
        samples, self.buffered_samples = self.buffered_samples, 0
        with_params = [(p, n) for p, n, _ in buffered if p is not None]
        if with_params:
            self.model.params = fedavg_aggregate(with_params)
        self.model.version += 1
        train_acc = loss = test_acc = None
        if self.evaluator is not None and self.model.params is not None:
            ids = [d for p, _, d in buffered if p is not None]
            train_acc, loss, test_acc = self.evaluator(self.model.params, ids)
        entry = HistoryEntry(self.model.version, now, len(buffered), samples,
                             train_acc, loss, test_acc, flush)
        self.model.history.append(entry)
        if self.on_event:
            self.on_event(now, "aggregate", len(buffered), None, None)
        return entry
