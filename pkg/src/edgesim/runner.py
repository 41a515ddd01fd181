"""Task execution: drive rounds through device emulation, DeviceFlow and the cloud.

Every task runs inside one shared :class:`~edgesim.engine.Engine`. A task's
events go through a per-task clock that swallows events after the task has
closed and turns handler exceptions into a failed status, so one broken
task never stalls the batch and its lease is always released.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .allocation import AllocationPlan
from .cloud import CloudService, Scheduled
from .devices import (DEFAULT_METRIC_PERIOD_MS, DeviceContext, Emission, MetricSample,
                      execute_operator_flow, profile_for, simulate_round_device,
                      simulate_round_logical)
from .deviceflow import Dispatcher, ShelfMessage, Sorter, strategy_to_dict
from .engine import RNG_ID, Engine, stream
from .fl import (ClientDataset, Dataset, ModelParams, evaluate, load_dataset_ref, partition,
                 partition_from_dict, split_holdout)
from .model import GradeSpec, TaskSpec
from .resources import ResourcePool, ScheduleDecision, TaskManager, TaskStatus
from .trace import (HISTORY_HEADER, METRIC_HEADER, TrafficTrace, dumps, write_csv)

log = logging.getLogger(__name__)

OUT_ENV = "EDGESIM_OUT"
DEFAULT_TEST_FRACTION = 0.2


@dataclass(frozen=True)
class RunOptions:
    window_ms: int | None = None  # truncate each task this long after it starts
    metric_period: int = DEFAULT_METRIC_PERIOD_MS


@dataclass
class RoundRecord:
    index: int
    start: int
    end: int | None = None
    emitted: int = 0
    shelved: int = 0
    expected: int = 0
    # grade -> (last logical compute end, last phone compute end), relative to start
    last: dict[str, list[int]] = field(default_factory=dict)


class _TaskClock:
    """Engine facade whose events are guarded by the owning task."""

    def __init__(self, engine: Engine, run: "TaskRun"):
        self.engine = engine
        self.run = run

    @property
    def now(self) -> int:
        return self.engine.now

    def schedule(self, at: int, handler, payload: Any = None) -> int:
        return self.engine.schedule(at, self.run._guarded, (handler, payload))


class Workload:
    """Datasets partitioned over a task's computing devices, plus evaluation data."""

    def __init__(self, spec: TaskSpec, n_clients: int, base_dir=None):
        self.clients: dict[str, list[ClientDataset]] = {}
        self.train: Dataset | None = None
        self.test: Dataset | None = None
        self.dim: int | None = None
        steps = [s for s in spec.operator_flow.steps if s.kind != "custom_sleep"]
        if not steps or n_clients == 0:
            return
        for i, step in enumerate(steps):
            if step.dataset_ref in self.clients:
                continue
            ds = load_dataset_ref(step.dataset_ref, base_dir, step.params)
            frac = float(step.params.get("test_fraction", DEFAULT_TEST_FRACTION))
            train, test = split_holdout(ds, frac, stream(spec.seed, "holdout", i))
            part = partition_from_dict(step.params.get("partition"))
            self.clients[step.dataset_ref] = partition(train, n_clients, part,
                                                       stream(spec.seed, "partition", i))
            if self.train is None:
                self.train, self.test, self.dim = train, test, ds.dim

    @property
    def active(self) -> bool:
        return bool(self.clients)

    def context(self, client: int, device_id: int, params: ModelParams | None) -> DeviceContext:
        return DeviceContext(device_id, params, {ref: parts[client] for ref, parts in self.clients.items()})

    def ctr(self) -> np.ndarray | None:
        if not self.clients:
            return None
        first = next(iter(self.clients.values()))
        return np.array([c.positive_fraction for c in first])

    def evaluate(self, params: ModelParams, _ids) -> tuple[float, float, float]:
        train_acc, loss = evaluate(params, self.train.X, self.train.y)
        test_acc, _ = evaluate(params, self.test.X, self.test.y)
        return train_acc, loss, test_acc


class TaskRun:
    """One admitted task: its devices, dispatcher, cloud service and bookkeeping."""

    def __init__(self, spec: TaskSpec, grades: Sequence[GradeSpec], plan: AllocationPlan,
                 engine: Engine, trace: TrafficTrace, sorter: Sorter,
                 on_done: Callable[["TaskRun"], None] | None = None,
                 base_dir=None, options: RunOptions = RunOptions()):
        self.spec = spec
        self.grades = tuple(grades)
        self.plan = plan
        self.engine = engine
        self.clock = _TaskClock(engine, self)
        self.trace = trace
        self.sorter = sorter
        self.on_done = on_done
        self.base_dir = base_dir
        self.options = options
        self.status = "pending"
        self.error: str | None = None
        self.closed = False
        self.truncated = False
        self.events = 0
        self.start_time = 0
        self.end_time: int | None = None
        self.rounds: list[RoundRecord] = []
        self.metric_samples: list[MetricSample] = []
        self.store: dict[str, Any] = {}
        self._layout()
        self.workload: Workload | None = None
        self.cloud: CloudService | None = None
        self.dispatcher: Dispatcher | None = None

    # -- setup ------------------------------------------------------------------

    def _layout(self) -> None:
        """Device ids per grade: logical x, then computing phones, then benchmarks."""
        self.layout: dict[str, tuple[list[int], list[int], list[int]]] = {}
        self.client_of: dict[int, int] = {}
        nxt = 0
        client = 0
        for g in self.grades:
            d = self.spec.demand[g.grade_id]
            x = self.plan.logical(g.grade_id)
            logical = list(range(nxt, nxt + x))
            phones = list(range(nxt + x, nxt + d.N - d.q))
            bench = list(range(nxt + d.N - d.q, nxt + d.N))
            nxt += d.N
            for dev in logical + phones:
                self.client_of[dev] = client
                client += 1
            self.layout[g.grade_id] = (logical, phones, bench)
        self.n_computing = client

    def start(self) -> None:
        self.start_time = self.engine.now
        self.status = "running"
        self.clock.schedule(self.start_time, self._begin)

    def _record(self, t: int, event: str, count: int, device_id=None, rnd=None) -> None:
        self.trace.record(t, self.spec.task_id, rnd, event, device_id, count)

    def _begin(self, _payload) -> None:
        spec = self.spec
        self.workload = Workload(spec, self.n_computing, self.base_dir)
        params = ModelParams.zeros(self.workload.dim) if self.workload.active else None
        evaluator = self.workload.evaluate if self.workload.active else None
        self.cloud = CloudService(spec.aggregation_trigger, self.store, params, evaluator,
                                  lambda t, kind, n, dev, rnd: self._record(t, kind, n, dev, rnd))
        shelf = self.sorter.shelf(spec.task_id)
        self.dispatcher = Dispatcher(spec.task_id, shelf, spec.dispatch_strategy, self.clock,
                                     self._deliver, stream(spec.seed, "dropout"),
                                     lambda t, kind, n, dev, rnd: self._record(t, kind, n, dev, rnd))
        if self.options.window_ms is not None:
            self.clock.schedule(self.start_time + self.options.window_ms, self._window_end)
        trig = spec.aggregation_trigger
        if isinstance(trig, Scheduled):
            self.clock.schedule(self.start_time + trig.period, self._boundary)
        self._start_round(0, self.engine.now)

    # -- rounds -----------------------------------------------------------------

    def _work(self, rnd: int, params: ModelParams | None):
        wl = self.workload
        if not wl.active:
            return None
        task = self.spec.task_id

        def work(dev: int):
            ctx = wl.context(self.client_of[dev], dev, params)
            payload, n, _stats = execute_operator_flow(ctx, self.spec.operator_flow)
            if payload is None:
                return None, n
            ref = f"{task}/{rnd}/{dev}"
            self.store[ref] = payload
            return ref, n
        return work

    def _start_round(self, rnd: int, now: int) -> None:
        spec = self.spec
        rec = RoundRecord(rnd, now, expected=self.n_computing)
        self.rounds.append(rec)
        params = self.cloud.model.params
        work = self._work(rnd, params)
        delays = spec.response_delay.sample(self.n_computing, stream(spec.seed, "delay", rnd),
                                            self.workload.ctr()) if spec.response_delay else None
        metric_rng = stream(spec.seed, "metrics", rnd)
        emissions: list[Emission] = []
        offset = 0
        for g in self.grades:
            logical, phones, bench = self.layout[g.grade_id]
            dl = None if delays is None else delays[offset:offset + len(logical)]
            offset += len(logical)
            em_l = simulate_round_logical(g, logical, g.f // g.k, now, work, dl)
            dp = None if delays is None else delays[offset:offset + len(phones)]
            offset += len(phones)
            em_p, samples = simulate_round_device(
                g, phones, g.m, now, rnd == 0, work, dp, bench_ids=bench,
                profile=profile_for(g.grade_id), metric_period=self.options.metric_period,
                rng=metric_rng)
            self.metric_samples.extend(samples)
            rec.last[g.grade_id] = [max((e.compute_end for e in em_l), default=now) - now,
                                    max((e.compute_end for e in em_p), default=now) - now]
            emissions.extend(em_l)
            emissions.extend(em_p)
        if not emissions:
            self.clock.schedule(now, self._close_round, rnd)
            return
        for e in emissions:
            self.clock.schedule(e.compute_end, self._emit, (rnd, e))

    def _emit(self, payload) -> None:
        rnd, e = payload
        now = self.engine.now
        self.rounds[rnd].emitted += 1
        self._record(now, "emit", 1, e.device_id, rnd)
        if e.ready_time > now:
            self.clock.schedule(e.ready_time, self._shelve, payload)
        else:
            self._shelve(payload)

    def _shelve(self, payload) -> None:
        rnd, e = payload
        now = self.engine.now
        msg = ShelfMessage(self.spec.task_id, rnd, e.device_id, e.grade, e.sample_count,
                           e.payload_ref, now)
        if self.sorter.sort_incoming(msg) is None:
            self._record(now, "duplicate", 1, e.device_id, rnd)
            return
        rec = self.rounds[rnd]
        rec.shelved += 1
        self._record(now, "shelve", 1, e.device_id, rnd)
        self.dispatcher.on_shelved(now)
        if rec.shelved == rec.expected:
            self._close_round(rnd)

    def _close_round(self, rnd) -> None:
        now = self.engine.now
        if self.spec.dispatch_strategy.rule_based:
            self.dispatcher.run_round(rnd, now, lambda t: self._after_round(rnd, t))
        else:
            self._after_round(rnd, now)

    def _after_round(self, rnd: int, t: int) -> None:
        self.rounds[rnd].end = t
        if rnd + 1 < self.spec.rounds:
            self._start_round(rnd + 1, t)
            return
        self.dispatcher.flush(t)
        self.clock.schedule(max(t, self.dispatcher.last_send), self._finish)

    # -- cloud --------------------------------------------------------------------

    def _deliver(self, msg: ShelfMessage, now: int) -> None:
        self.cloud.receive_message(msg, now)
        if msg.payload_ref is not None:
            self.store.pop(msg.payload_ref, None)

    def _boundary(self, _payload) -> None:
        now = self.engine.now
        self.cloud.maybe_aggregate(now, at_boundary=True)
        self.clock.schedule(now + self.spec.aggregation_trigger.period, self._boundary)

    # -- completion -------------------------------------------------------------

    def _finish(self, _payload) -> None:
        now = self.engine.now
        self.cloud.flush(now)
        self._close("completed", now)

    def _window_end(self, _payload) -> None:
        self.truncated = True
        self._close("completed", self.engine.now)

    def _guarded(self, hp) -> None:
        if self.closed:
            return
        handler, payload = hp
        self.events += 1
        try:
            handler(payload)
        except Exception as exc:  # any module error fails the task, not the batch
            log.error("task %s failed: %s", self.spec.task_id, exc)
            self.error = f"{type(exc).__name__}: {exc}"
            self._close("failed", self.engine.now)

    def _close(self, status: str, now: int) -> None:
        if self.closed:
            return
        self.closed = True
        self.status = status
        self.end_time = now
        self.store.clear()
        if self.on_done is not None:
            self.on_done(self)

    # -- reporting ----------------------------------------------------------------

    def residual(self) -> dict[int, int]:
        """Per round: emitted but neither received nor dropped."""
        out = {}
        if self.dispatcher is None:
            return out
        d = self.dispatcher
        for rec in self.rounds:
            left = rec.emitted - d.delivered[rec.index] - d.dropped[rec.index]
            if left:
                out[rec.index] = left
        return out

    def report(self, out_env: str | None = None) -> dict:
        spec = self.spec
        d = self.dispatcher
        rounds = []
        for rec in self.rounds:
            i = rec.index
            rounds.append({
                "round": i,
                "start_ms": rec.start,
                "end_ms": rec.end,
                "span_ms": None if rec.end is None else rec.end - rec.start,
                "emitted": rec.emitted,
                "dispatched": d.dispatched[i] if d else 0,
                "delivered": d.delivered[i] if d else 0,
                "dropped": d.dropped[i] if d else 0,
                "last_emission_ms": {gid: {"logical": v[0], "device": v[1]}
                                     for gid, v in rec.last.items()},
            })
        residual = self.residual()
        counts = {
            "emitted": sum(r.emitted for r in self.rounds),
            "delivered": sum(d.delivered.values()) if d else 0,
            "dropped": sum(d.dropped.values()) if d else 0,
            "residual": sum(residual.values()),
            "corrupt": self.cloud.corrupt if self.cloud else 0,
            "shortfalls": len(d.shortfalls) if d else 0,
        }
        history = self.cloud.model.history if self.cloud else []
        final = None
        if history:
            h = history[-1]
            final = {"version": h.version, "t_ms": h.t_ms, "train_acc": h.train_acc,
                     "loss": h.loss, "test_acc": h.test_acc}
        plans = {}
        if d is not None:
            for rnd, p in sorted(d.plans.items()):
                plans[str(rnd)] = {"base_ms": d.plan_base[rnd], "step_ms": p.step, "total": p.total,
                                   "points": len(p.points)}
        report = {
            "task_id": spec.task_id,
            "status": self.status,
            "error": self.error,
            "version": __version__,
            "seed": spec.seed,
            "rng": RNG_ID,
            "allocation": {
                **self.plan.to_dict(),
                "grade_ids": list(self.plan.grade_ids),
                "f": [g.f for g in self.grades],
                "m": [g.m for g in self.grades],
            },
            "dispatch_strategy": strategy_to_dict(spec.dispatch_strategy),
            "dispatch_plans": plans,
            "rounds": rounds,
            "rounds_completed": sum(1 for r in self.rounds if r.end is not None),
            "counts": counts,
            "residual_by_round": {str(k): v for k, v in sorted(residual.items())},
            "aggregations": len(history),
            "final": final,
            "start_ms": self.start_time,
            "end_ms": self.end_time,
            "truncated": self.truncated,
            "window_ms": self.options.window_ms,
            "engine": {"events": self.events},
            "traces": {"traffic": "traffic.csv", "metrics": "metrics.csv",
                       "aggregation": "aggregation.csv"},
        }
        if out_env is not None:
            report["output_dir_env"] = {OUT_ENV: out_env}
        return report

    def write(self, out_dir: str | Path, out_env: str | None = None) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        seed = self.spec.seed
        self.trace.write(out / "traffic.csv", seed, self.spec.task_id)
        write_csv(out / "metrics.csv", METRIC_HEADER,
                  ((s.device_id, s.grade, s.stage, s.t, s.current_uA, s.voltage_mV, s.cpu_pct,
                    s.mem_KB, s.bandwidth_B) for s in self.metric_samples), seed)
        history = self.cloud.model.history if self.cloud else []
        write_csv(out / "aggregation.csv", HISTORY_HEADER,
                  ((h.version, h.t_ms, h.messages, h.samples, h.train_acc, h.loss, h.test_acc)
                   for h in history), seed)
        report = self.report(out_env)
        (out / "report.json").write_text(dumps(report), encoding="utf-8")
        return report


# -- batch driver --------------------------------------------------------------------

@dataclass
class BatchResult:
    runs: dict[str, TaskRun]
    manager: TaskManager
    engine: Engine
    trace: TrafficTrace
    admissions: list[tuple[int, str]]  # (virtual time, task id) in admission order


def run_batch(specs: Sequence[TaskSpec], pool: ResourcePool, options: RunOptions = RunOptions(),
              base_dir=None, audit: Callable[[ResourcePool], None] | None = None) -> BatchResult:
    """Queue every spec, then run until no task can make progress.

    Scheduling ticks happen at submission and whenever a task finishes.
    ``audit(pool)`` is called after every freeze and release.
    """
    engine = Engine()
    trace = TrafficTrace()
    sorter = Sorter()
    manager = TaskManager(pool)
    runs: dict[str, TaskRun] = {}
    admissions: list[tuple[int, str]] = []

    def check() -> None:
        pool.check()
        if audit is not None:
            audit(pool)

    def done(run: TaskRun) -> None:
        manager.finish(run.spec.task_id, run.status == "completed", run.error)
        check()
        tick()

    def tick() -> None:
        for dec in manager.tick_schedule(engine.now):
            check()
            admit(dec)

    def admit(dec: ScheduleDecision) -> None:
        rec = manager.records[dec.task_id]
        run = TaskRun(rec.spec, dec.grades, dec.plan, engine, trace, sorter, done, base_dir, options)
        runs[dec.task_id] = run
        admissions.append((engine.now, dec.task_id))
        run.start()

    for spec in specs:
        manager.enqueue(spec, base_dir)
    tick()
    engine.run_until()
    for rec in manager.records.values():
        if rec.status is TaskStatus.QUEUED:
            log.warning("task %s never fit the pool", rec.spec.task_id)
    return BatchResult(runs, manager, engine, trace, admissions)


def run_task(spec: TaskSpec, pool: ResourcePool | None = None,
             options: RunOptions = RunOptions(), base_dir=None) -> TaskRun:
    """Run one task on ``pool`` (default: exactly the resources it declares)."""
    pool = pool if pool is not None else ResourcePool.for_spec(spec)
    result = run_batch([spec], pool, options, base_dir)
    if spec.task_id not in result.runs:
        raise RuntimeError(f"task {spec.task_id} could not be scheduled on the pool")
    return result.runs[spec.task_id]


def resolve_out_dir(out: str | Path | None) -> tuple[Path, str | None]:
    """The output directory, honouring the environment override (returned for echoing)."""
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env), env
    if out is None:
        raise ValueError(f"no output directory: pass --out or set {OUT_ENV}")
    return Path(out), None
