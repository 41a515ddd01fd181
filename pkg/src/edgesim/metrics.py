"""Statistics over traces: Pearson correlation, curve fidelity, summaries."""

from __future__ import annotations

from collections import Counter
from typing import Iterable

import numpy as np

from .deviceflow.compile import step_auc
from .deviceflow.strategy import TimeInterval
from .trace import TraceRow


class UndefinedCorrelation(ValueError):
    """Pearson r is undefined (a series has zero variance)."""


class FidelityError(ValueError):
    pass


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("pearson needs two 1-d series of equal length")
    if len(a) < 2:
        raise ValueError("pearson needs at least two points")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.dot(da, da))
    sb = np.sqrt(np.dot(db, db))
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelation("zero variance")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def binned_counts(rows: Iterable[TraceRow], task_id: str, rnd: int, origin: int, step: int,
                  n_bins: int, event: str = "dispatch") -> np.ndarray:
    """Counts of ``event`` per ``step``-ms bin starting at ``origin``; outliers are ignored."""
    out = np.zeros(n_bins, dtype=np.int64)
    for r in rows:
        if r.task_id == task_id and r.round == rnd and r.event == event:
            j = (r.t_ms - origin) // step
            if 0 <= j < n_bins:
                out[j] += r.count
    return out


def curve_fidelity(spec: TimeInterval, rows: Iterable[TraceRow], task_id: str, rnd: int,
                   origin: int, step: int) -> float:
    """Pearson r between per-step dispatch counts and the scaled target AUC.

    ``origin`` is the virtual instant the interval starts. A flat target
    has no variance; it scores 1.0 when every bin is within one count of
    its share (the rounding jitter of the apportionment) and fails
    otherwise.
    """
    target = step_auc(spec, step)
    actual = binned_counts(rows, task_id, rnd, origin, step, len(target))
    total = actual.sum()
    if total == 0:
        raise FidelityError("empty trace window")
    scaled = total * target / target.sum()
    if np.ptp(target) <= 1e-12 * max(1.0, abs(target).max()):
        if np.all(np.abs(actual - scaled) <= 1.0 + 1e-9):
            return 1.0
        raise FidelityError("flat target curve but dispatch counts deviate by more than one")
    try:
        return pearson(scaled, actual)
    except UndefinedCorrelation as exc:
        raise FidelityError(f"dispatch counts are flat: {exc}") from None


def event_totals(rows: Iterable[TraceRow]) -> dict[str, dict[str, int]]:
    """Per task, total message count of each event kind."""
    out: dict[str, Counter] = {}
    for r in rows:
        out.setdefault(r.task_id, Counter())[r.event] += r.count
    return {t: dict(sorted(c.items())) for t, c in sorted(out.items())}


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return {"n": 0}
    return {"n": int(len(v)), "mean": float(v.mean()), "std": float(v.std(ddof=0)),
            "min": float(v.min()), "max": float(v.max())}
