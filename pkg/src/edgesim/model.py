"""Task specification types, JSON (de)serialisation and validation.

Durations are written in the task file as decimal seconds (``alpha_s``,
``period_s``...) and stored internally as integer milliseconds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .engine import to_ms

STEP_KINDS = ("train_lr", "predict_lr", "custom_sleep")

_TOP_KEYS = {"task_id", "priority", "rounds", "seed", "grades", "operator_flow",
             "dispatch_strategy", "aggregation_trigger", "response_delay", "allocation_override"}
_REQUIRED = ("task_id", "rounds", "grades", "operator_flow", "dispatch_strategy",
             "aggregation_trigger")
_GRADE_KEYS = {"grade_id", "k", "f", "m", "alpha_s", "beta_s", "lambda_s", "N", "q"}
_STEP_KEYS = {"kind", "dataset_ref", "params"}


class SpecError(ValueError):
    """The task document is malformed or violates a type invariant."""


@dataclass(frozen=True)
class GradeSpec:
    grade_id: str
    k: int
    f: int
    m: int
    alpha: int  # ms, per-device time in logical simulation
    beta: int  # ms, per-device time on a phone
    lam: int  # ms, one-time framework startup on a phone

    def violations(self) -> list[str]:
        out = []
        if self.k < 1:
            out.append(f"grade {self.grade_id}: k must be >= 1")
        if self.f < 0 or self.m < 0:
            out.append(f"grade {self.grade_id}: f and m must be >= 0")
        if self.alpha <= 0 or self.beta <= 0:
            out.append(f"grade {self.grade_id}: alpha and beta must be positive")
        if self.lam < 0:
            out.append(f"grade {self.grade_id}: lambda must be >= 0")
        return out


@dataclass(frozen=True)
class GradeDemand:
    grade_id: str
    N: int
    q: int = 0


@dataclass(frozen=True)
class SimulationDemand:
    items: tuple[GradeDemand, ...]

    def __getitem__(self, grade_id: str) -> GradeDemand:
        for d in self.items:
            if d.grade_id == grade_id:
                return d
        raise KeyError(grade_id)

    def __iter__(self):
        return iter(self.items)

    @property
    def total(self) -> int:
        return sum(d.N for d in self.items)


@dataclass(frozen=True)
class OperatorStep:
    kind: str
    dataset_ref: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class OperatorFlow:
    steps: tuple[OperatorStep, ...]

    def dataset_refs(self) -> list[str]:
        return [s.dataset_ref for s in self.steps if s.kind != "custom_sleep"]


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    rounds: int
    demand: SimulationDemand
    grades: tuple[GradeSpec, ...]
    operator_flow: OperatorFlow
    dispatch_strategy: Any
    aggregation_trigger: Any
    response_delay: Any = None
    priority: int = 0
    seed: int = 0
    allocation_override: Mapping[str, int] | None = None

    def grade(self, grade_id: str) -> GradeSpec:
        for g in self.grades:
            if g.grade_id == grade_id:
                return g
        raise KeyError(grade_id)

    @property
    def computing_devices(self) -> int:
        return sum(d.N - d.q for d in self.demand)


# -- parsing ----------------------------------------------------------------

def _strict(d: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise SpecError(f"{where}: expected an object")
    for key in d:
        if key not in allowed:
            raise SpecError(f"{where}: unknown field '{key}'")
    return d


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise SpecError(f"{where}: missing required field '{key}'")
    return d[key]


def _int(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SpecError(f"{where}: expected an integer, got {v!r}")
    return v


def _seconds(v: Any, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SpecError(f"{where}: expected a number of seconds, got {v!r}")
    return to_ms(float(v))


def _parse_grade(d: dict, i: int) -> tuple[GradeSpec, GradeDemand]:
    where = f"grades[{i}]"
    _strict(d, _GRADE_KEYS, where)
    gid = _req(d, "grade_id", where)
    if not isinstance(gid, str) or not gid:
        raise SpecError(f"{where}: grade_id must be a nonempty string")
    g = GradeSpec(
        gid,
        _int(_req(d, "k", where), f"{where}.k"),
        _int(_req(d, "f", where), f"{where}.f"),
        _int(_req(d, "m", where), f"{where}.m"),
        _seconds(_req(d, "alpha_s", where), f"{where}.alpha_s"),
        _seconds(_req(d, "beta_s", where), f"{where}.beta_s"),
        _seconds(d.get("lambda_s", 0), f"{where}.lambda_s"),
    )
    dem = GradeDemand(gid, _int(_req(d, "N", where), f"{where}.N"),
                      _int(d.get("q", 0), f"{where}.q"))
    return g, dem


def _parse_step(d: dict, i: int) -> OperatorStep:
    where = f"operator_flow[{i}]"
    _strict(d, _STEP_KEYS, where)
    kind = _req(d, "kind", where)
    if kind not in STEP_KINDS:
        raise SpecError(f"{where}: unknown operator kind '{kind}'")
    ref = d.get("dataset_ref", "")
    if kind != "custom_sleep" and not ref:
        raise SpecError(f"{where}: missing required field 'dataset_ref'")
    params = d.get("params", {})
    if not isinstance(params, dict):
        raise SpecError(f"{where}.params: expected an object")
    return OperatorStep(kind, ref, dict(params))


def spec_from_dict(doc: dict) -> TaskSpec:
    # imported here: these modules import GradeSpec from this one
    from .cloud import TriggerError, trigger_from_dict
    from .devices import DelayError, delay_from_dict
    from .deviceflow.strategy import StrategyError, strategy_from_dict

    _strict(doc, _TOP_KEYS, "task")
    for key in _REQUIRED:
        _req(doc, key, "task")
    task_id = doc["task_id"]
    if not isinstance(task_id, str) or not task_id:
        raise SpecError("task.task_id: must be a nonempty string")
    grades_doc = doc["grades"]
    if not isinstance(grades_doc, list) or not grades_doc:
        raise SpecError("task.grades: expected a nonempty array")
    parsed = [_parse_grade(g, i) for i, g in enumerate(grades_doc)]
    ids = [g.grade_id for g, _ in parsed]
    if len(set(ids)) != len(ids):
        raise SpecError("task.grades: duplicate grade_id")
    flow_doc = doc["operator_flow"]
    if not isinstance(flow_doc, list):
        raise SpecError("task.operator_flow: expected an array")
    flow = OperatorFlow(tuple(_parse_step(s, i) for i, s in enumerate(flow_doc)))
    seed = _int(doc.get("seed", 0), "task.seed")
    if not 0 <= seed < 2**64:
        raise SpecError("task.seed: must be a 64-bit unsigned integer")
    override = doc.get("allocation_override")
    if override is not None:
        if not isinstance(override, dict):
            raise SpecError("task.allocation_override: expected an object")
        override = {str(k): _int(v, f"allocation_override.{k}") for k, v in override.items()}
    try:
        strategy = strategy_from_dict(doc["dispatch_strategy"])
        trigger = trigger_from_dict(doc["aggregation_trigger"])
        delay = delay_from_dict(doc.get("response_delay"))
    except (StrategyError, TriggerError, DelayError) as exc:
        raise SpecError(str(exc)) from exc
    spec = TaskSpec(
        task_id=task_id,
        rounds=_int(doc["rounds"], "task.rounds"),
        demand=SimulationDemand(tuple(d for _, d in parsed)),
        grades=tuple(g for g, _ in parsed),
        operator_flow=flow,
        dispatch_strategy=strategy,
        aggregation_trigger=trigger,
        response_delay=delay,
        priority=_int(doc.get("priority", 0), "task.priority"),
        seed=seed,
        allocation_override=override,
    )
    problems = invariant_violations(spec)
    if problems:
        raise SpecError("; ".join(problems))
    return spec


def parse_task_spec(text: str) -> TaskSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return spec_from_dict(doc)


def load_task_spec(path: str | Path) -> TaskSpec:
    return parse_task_spec(Path(path).read_text(encoding="utf-8"))


def spec_to_dict(spec: TaskSpec) -> dict:
    from .cloud import trigger_to_dict
    from .devices import delay_to_dict
    from .deviceflow.strategy import strategy_to_dict

    grades = []
    for g in spec.grades:
        d = spec.demand[g.grade_id]
        grades.append({"grade_id": g.grade_id, "k": g.k, "f": g.f, "m": g.m,
                       "alpha_s": g.alpha / 1000.0, "beta_s": g.beta / 1000.0,
                       "lambda_s": g.lam / 1000.0, "N": d.N, "q": d.q})
    doc = {
        "task_id": spec.task_id,
        "priority": spec.priority,
        "rounds": spec.rounds,
        "seed": spec.seed,
        "grades": grades,
        "operator_flow": [{"kind": s.kind, "dataset_ref": s.dataset_ref, "params": dict(s.params)}
                          for s in spec.operator_flow.steps],
        "dispatch_strategy": strategy_to_dict(spec.dispatch_strategy),
        "aggregation_trigger": trigger_to_dict(spec.aggregation_trigger),
        "response_delay": delay_to_dict(spec.response_delay),
    }
    if spec.allocation_override is not None:
        doc["allocation_override"] = dict(spec.allocation_override)
    return doc


def serialize_task_spec(spec: TaskSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2) + "\n"


# -- validation -------------------------------------------------------------

def invariant_violations(spec: TaskSpec) -> list[str]:
    """Type-level invariants that need no pool or filesystem."""
    out: list[str] = []
    if spec.rounds < 1:
        out.append("rounds must be >= 1")
    if not spec.operator_flow.steps:
        out.append("operator flow needs at least one step")
    for g in spec.grades:
        out.extend(g.violations())
        d = spec.demand[g.grade_id]
        if d.N < 0 or d.q < 0:
            out.append(f"grade {g.grade_id}: N and q must be >= 0")
        if d.q > d.N:
            out.append(f"grade {g.grade_id}: benchmarking exceeds demand (q={d.q} > N={d.N})")
    if spec.allocation_override is not None:
        for gid, x in spec.allocation_override.items():
            try:
                d = spec.demand[gid]
            except KeyError:
                out.append(f"allocation_override: unknown grade {gid}")
                continue
            if not 0 <= x <= d.N - d.q:
                out.append(f"allocation_override: x={x} outside [0, {d.N - d.q}] for grade {gid}")
    for s in spec.operator_flow.steps:
        if s.kind == "train_lr":
            if int(s.params.get("epochs", 10)) < 1:
                out.append("train_lr: epochs must be >= 1")
            if float(s.params.get("learning_rate", 1e-3)) < 0:
                out.append("train_lr: learning_rate must be >= 0")
        if s.kind == "custom_sleep" and float(s.params.get("sleep_s", 0)) < 0:
            out.append("custom_sleep: sleep_s must be >= 0")
    return out


def validate_task_spec(spec: TaskSpec, pool=None, base_dir: str | Path | None = None) -> list[str]:
    """Every violation found; an empty list means the spec can run on ``pool``.

    ``pool`` is a :class:`~edgesim.resources.ResourcePool`; when omitted only
    the spec's own declared resources are checked. Never mutates its inputs.
    """
    from .fl import DatasetError, check_dataset_ref

    out = invariant_violations(spec)
    for g in spec.grades:
        d = spec.demand[g.grade_id]
        if d.N - d.q > 0 and g.f < g.k and g.m < 1:
            out.append(f"grade {g.grade_id} unhostable")
        if pool is not None:
            if g.grade_id not in pool.grade_ids:
                out.append(f"grade {g.grade_id} missing from pool")
                continue
            cap = pool.capacity(g.grade_id)
            if cap.phones_total < d.q:
                out.append(f"grade {g.grade_id}: pool has fewer phones than benchmarking demand")
            # the scheduler clamps declared f/m to the pool, so judge on the clamped values
            elif (d.N - d.q > 0 and min(g.f, cap.bundles_total) < g.k
                  and min(g.m, cap.phones_total - d.q) < 1):
                out.append(f"grade {g.grade_id} unhostable on pool")
    seen = set()
    for s in spec.operator_flow.steps:
        if s.kind == "custom_sleep" or s.dataset_ref in seen:
            continue
        seen.add(s.dataset_ref)
        try:
            check_dataset_ref(s.dataset_ref, base_dir, s.params)
        except DatasetError as exc:
            out.append(f"unresolved dataset: {s.dataset_ref} ({exc})")
    return out
