"""Trace files (traffic, metrics, aggregation history), formatting and auditors.

Every CSV starts with one ``#`` comment line carrying the format version,
the task seed and the RNG identifier. Floats are written in fixed
notation with 9 significant digits.
"""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .engine import RNG_ID

TRAFFIC_HEADER = ("t_ms", "task_id", "round", "event", "device_id", "count", "cumulative")
METRIC_HEADER = ("device_id", "grade", "stage", "t_ms", "current_uA", "voltage_mV", "cpu_pct",
                 "mem_kb", "bandwidth_B")
HISTORY_HEADER = ("version", "t_ms", "messages", "samples", "train_acc", "loss", "test_acc")
EVENTS = ("emit", "shelve", "dispatch", "drop", "receive", "aggregate", "flush")


def fmt_float(x: float) -> str:
    if x is None:
        return ""
    if x == 0:
        return "0"
    return np.format_float_positional(float(x), precision=9, unique=False, fractional=False,
                                      trim="-")


def header_comment(seed: int) -> str:
    return f"# edgesim {__version__} seed={seed} rng={RNG_ID}"


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return fmt_float(v)
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]], seed: int) -> None:
    buf = io.StringIO()
    buf.write(header_comment(seed) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[str, list[dict[str, str]]]:
    """(comment line, rows as dicts keyed by header)."""
    with open(path, newline="", encoding="utf-8") as fh:
        comment = fh.readline().rstrip("\n")
        return comment, list(csv.DictReader(fh))


@dataclass(frozen=True, slots=True)
class TraceRow:
    t_ms: int
    task_id: str
    round: int | None
    event: str
    device_id: int | None
    count: int
    cumulative: int

    def as_tuple(self) -> tuple:
        return (self.t_ms, self.task_id, self.round, self.event, self.device_id, self.count,
                self.cumulative)


class TrafficTrace:
    """Append-only event log; ``cumulative`` runs per (task, event)."""

    def __init__(self):
        self.rows: list[TraceRow] = []
        self._cum: Counter = Counter()

    def record(self, t: int, task_id: str, rnd: int | None, event: str,
               device_id: int | None, count: int) -> None:
        key = (task_id, event)
        self._cum[key] += count
        self.rows.append(TraceRow(t, task_id, rnd, event, device_id, count, self._cum[key]))

    def for_task(self, task_id: str) -> list[TraceRow]:
        return [r for r in self.rows if r.task_id == task_id]

    def write(self, path: str | Path, seed: int, task_id: str | None = None) -> None:
        rows = self.rows if task_id is None else self.for_task(task_id)
        write_csv(path, TRAFFIC_HEADER, (r.as_tuple() for r in rows), seed)


def load_traffic(path: str | Path) -> list[TraceRow]:
    _, rows = read_csv(path)
    out = []
    for r in rows:
        out.append(TraceRow(int(r["t_ms"]), r["task_id"],
                            int(r["round"]) if r["round"] else None, r["event"],
                            int(r["device_id"]) if r["device_id"] else None,
                            int(r["count"]), int(r["cumulative"])))
    return out


# -- auditors -----------------------------------------------------------------

def max_window_count(rows: Iterable[TraceRow], event: str = "receive", window: int = 1000) -> dict[str, int]:
    """Largest number of ``event`` messages in any sliding ``window`` ms, per task."""
    times: dict[str, list[int]] = defaultdict(list)
    for r in rows:
        if r.event == event:
            times[r.task_id].extend([r.t_ms] * r.count)
    out = {}
    for task, ts in times.items():
        arr = np.sort(np.asarray(ts, dtype=np.int64))
        # for each send i, how many sends fall in [t_i, t_i + window)
        hi = np.searchsorted(arr, arr + window, side="left")
        out[task] = int((hi - np.arange(len(arr))).max())
    return out


def audit_capacity(rows: Iterable[TraceRow], capacity: int | dict[str, int]) -> list[str]:
    problems = []
    for task, worst in max_window_count(rows).items():
        cap = capacity[task] if isinstance(capacity, dict) else capacity
        if worst > cap:
            problems.append(f"task {task}: {worst} messages in one second exceeds capacity {cap}")
    return problems


def round_counts(rows: Iterable[TraceRow]) -> dict[tuple[str, int], Counter]:
    """Per (task, round) totals of each event kind recorded in a trace."""
    out: dict[tuple[str, int], Counter] = defaultdict(Counter)
    for r in rows:
        if r.round is not None:
            out[(r.task_id, r.round)][r.event] += r.count
    return out


def audit_conservation(rows: Iterable[TraceRow], residual: dict[tuple[str, int], int] | None = None) -> list[str]:
    """Check emitted == received + dropped + residual for every (task, round).

    Without ``residual`` the run is assumed complete, so nothing may remain.
    """
    problems = []
    for key, c in sorted(round_counts(rows).items()):
        left = (residual or {}).get(key, 0)
        if c["emit"] != c["receive"] + c["drop"] + left:
            problems.append(f"{key}: emitted {c['emit']} != received {c['receive']} + "
                            f"dropped {c['drop']} + residual {left}")
    return problems


# -- deterministic JSON ---------------------------------------------------------

def dumps(obj: Any, indent: int = 2) -> str:
    """JSON with sorted keys and fixed-notation floats, byte-stable across runs."""
    def enc(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if o is None:
            return "null"
        if o is True:
            return "true"
        if o is False:
            return "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            if not np.isfinite(o):
                return "null"
            return fmt_float(float(o))
        if isinstance(o, str):
            import json
            return json.dumps(o)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{enc(str(k), level + 1)}: {enc(v, level + 1)}"
                     for k, v in sorted(o.items(), key=lambda kv: str(kv[0]))]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in o) + "\n" + end + "]"
        raise TypeError(f"cannot encode {type(o).__name__}")
    return enc(obj, 0) + "\n"
