"""Emulated logical simulation (bundle slots) and device simulation (phones).

A device's virtual-time cost is the grade's constant ``alpha`` (logical)
or ``beta`` (phone); the operator flow still runs for its numeric result.
Phones pay ``lambda`` once, on the task's first round. Benchmarking phones
play back a five-stage profile and emit metric samples instead of results.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Callable, Mapping, Sequence

import numpy as np

from .engine import to_ms
from .fl import ClientDataset, ModelParams, evaluate, train_local_lr

if TYPE_CHECKING:
    from .model import GradeSpec, OperatorFlow

METRIC_NOISE = 0.05
DEFAULT_METRIC_PERIOD_MS = 1000


class DeviceError(RuntimeError):
    pass


class DelayError(ValueError):
    pass


# -- response delays --------------------------------------------------------

@dataclass(frozen=True)
class ResponseDelayModel:
    """Per-device emission delay: ``none``, ``fixed`` or ``right_tail_normal``.

    ``right_tail_normal`` draws ``|N(0, sigma)| * scale``. With ``ctr_linked``
    the sorted draws go to devices in descending click-rate order, so
    high-CTR clients report first.
    """

    kind: str = "none"
    delay: int = 0  # ms
    sigma: float = 1.0
    scale: int = 1000  # ms
    ctr_linked: bool = False

    def sample(self, n: int, rng: np.random.Generator, ctr: Sequence[float] | None = None) -> np.ndarray:
        if self.kind == "none":
            return np.zeros(n, dtype=np.int64)
        if self.kind == "fixed":
            return np.full(n, self.delay, dtype=np.int64)
        draws = np.rint(np.abs(rng.normal(0.0, self.sigma, n)) * self.scale).astype(np.int64)
        if self.ctr_linked and ctr is not None:
            order = np.argsort(-np.asarray(ctr, dtype=float), kind="stable")
            out = np.empty(n, dtype=np.int64)
            out[order] = np.sort(draws)
            return out
        return draws


def delay_from_dict(d: dict | None) -> ResponseDelayModel:
    if d is None:
        return ResponseDelayModel()
    kind = d.get("type", "none")
    allowed = {"none": {"type"}, "fixed": {"type", "delay_s"},
               "right_tail_normal": {"type", "sigma", "scale_s", "ctr_linked"}}
    if kind not in allowed:
        raise DelayError(f"unknown response delay '{kind}'")
    extra = set(d) - allowed[kind]
    if extra:
        raise DelayError(f"response_delay: unknown field '{sorted(extra)[0]}'")
    if kind == "none":
        return ResponseDelayModel()
    if kind == "fixed":
        delay = to_ms(float(d.get("delay_s", 0.0)))
        if delay < 0:
            raise DelayError("fixed delay must be >= 0")
        return ResponseDelayModel("fixed", delay=delay)
    sigma = float(d.get("sigma", 1.0))
    scale = to_ms(float(d.get("scale_s", 1.0)))
    if sigma <= 0 or scale < 0:
        raise DelayError("right_tail_normal needs sigma > 0 and scale >= 0")
    return ResponseDelayModel("right_tail_normal", sigma=sigma, scale=scale,
                              ctr_linked=bool(d.get("ctr_linked", False)))


def delay_to_dict(m: ResponseDelayModel | None) -> dict:
    if m is None or m.kind == "none":
        return {"type": "none"}
    if m.kind == "fixed":
        return {"type": "fixed", "delay_s": m.delay / 1000.0}
    return {"type": "right_tail_normal", "sigma": m.sigma, "scale_s": m.scale / 1000.0,
            "ctr_linked": m.ctr_linked}


# -- stage profiles ---------------------------------------------------------

STAGE_NAMES = ("no_apk_initiated", "apk_launch", "training", "post_training", "apk_closure")


@dataclass(frozen=True)
class Stage:
    name: str
    power_mAh: float
    duration_min: float
    commu_KB: float = 0.0
    cpu_pct: float = 0.0
    mem_KB: float = 0.0

    @property
    def duration_ms(self) -> int:
        return to_ms(self.duration_min * 60.0)

    @property
    def current_uA(self) -> float:
        return self.power_mAh / (self.duration_min / 60.0) * 1000.0


@dataclass(frozen=True)
class StageProfile:
    grade: str
    stages: tuple[Stage, ...]
    voltage_mV: float = 3850.0

    @property
    def duration_ms(self) -> int:
        return sum(s.duration_ms for s in self.stages)


def _profile(grade, power, minutes, cpu, mem):
    return StageProfile(grade, tuple(
        Stage(name, p, d, 33.10 if name == "training" else 0.0, c, m)
        for name, p, d, c, m in zip(STAGE_NAMES, power, minutes, cpu, mem)))


# power and durations are measured values; cpu and memory levels are templates
DEFAULT_PROFILES = {
    "High": _profile("High", (0.24, 0.51, 0.18, 0.37, 0.44), (0.25, 0.25, 0.27, 0.25, 0.25),
                     (4.0, 28.0, 62.0, 22.0, 6.0), (0.0, 185_000.0, 262_000.0, 204_000.0, 0.0)),
    "Low": _profile("Low", (1.71, 1.80, 0.66, 1.65, 1.82), (0.25, 0.25, 0.36, 0.25, 0.25),
                    (9.0, 46.0, 88.0, 39.0, 12.0), (0.0, 171_000.0, 248_000.0, 190_000.0, 0.0)),
}


def profile_for(grade_id: str) -> StageProfile:
    """Default profile by case-insensitive label; unknown grades use ``High``."""
    for name, prof in DEFAULT_PROFILES.items():
        if name.lower() == grade_id.lower():
            return prof
    return DEFAULT_PROFILES["High"]


@dataclass(frozen=True)
class MetricSample:
    device_id: int
    grade: str
    stage: str
    t: int
    current_uA: float
    voltage_mV: float
    cpu_pct: float
    mem_KB: float
    bandwidth_B: float


def benchmark_trace(device_id: int, grade: str, profile: StageProfile, start: int,
                    period: int, rng: np.random.Generator) -> list[MetricSample]:
    """Play one benchmarking device through every stage, sampling every ``period`` ms."""
    out = []
    t0 = start
    for st in profile.stages:
        times = np.arange(t0, t0 + st.duration_ms, period)
        k = len(times)
        noise = 1.0 + rng.uniform(-METRIC_NOISE, METRIC_NOISE, (k, 5))
        bw = st.commu_KB * 1024.0 / k if k else 0.0
        for i, t in enumerate(times):
            n = noise[i]
            out.append(MetricSample(device_id, grade, st.name, int(t),
                                    round(st.current_uA * n[0], 3),
                                    round(profile.voltage_mV * n[1], 3),
                                    round(st.cpu_pct * n[2], 3),
                                    round(st.mem_KB * n[3], 3),
                                    round(bw * n[4], 3)))
        t0 += st.duration_ms
    return out


# -- rounds -----------------------------------------------------------------

@dataclass(slots=True)
class Emission:
    device_id: int
    grade: str
    route: str  # "logical" | "device"
    compute_end: int
    ready_time: int
    payload_ref: str | None
    sample_count: int


# work(device_id) -> (payload_ref, sample_count)
Work = Callable[[int], tuple[Any, int]]


def _idle(_device_id: int) -> tuple[None, int]:
    return None, 0


def simulate_round_logical(grade: "GradeSpec", device_ids: Sequence[int], slots: int, start: int,
                           work: Work | None = None,
                           delays: Sequence[int] | None = None) -> list[Emission]:
    """Deal devices round-robin over ``slots``; each slot runs its devices back to back."""
    if len(device_ids) and slots < 1:
        raise DeviceError(f"no logical slots for grade {grade.grade_id} with work assigned")
    work = work or _idle
    out = []
    for j, dev in enumerate(device_ids):
        end = start + (j // slots + 1) * grade.alpha
        ref, n = work(dev)
        delay = int(delays[j]) if delays is not None else 0
        out.append(Emission(dev, grade.grade_id, "logical", end, end + delay, ref, n))
    return out


def simulate_round_device(grade: "GradeSpec", device_ids: Sequence[int], phones: int, start: int,
                          first_round: bool, work: Work | None = None,
                          delays: Sequence[int] | None = None, *,
                          bench_ids: Sequence[int] = (), profile: StageProfile | None = None,
                          metric_period: int = DEFAULT_METRIC_PERIOD_MS,
                          rng: np.random.Generator | None = None) -> tuple[list[Emission], list[MetricSample]]:
    """Computing phones pay ``lambda`` (first round only) then ``beta`` per device.

    Benchmarking phones run alongside and never emit results.
    """
    if len(device_ids) and phones < 1:
        raise DeviceError(f"no phones for grade {grade.grade_id} with work assigned")
    work = work or _idle
    boot = grade.lam if first_round else 0
    out = []
    for j, dev in enumerate(device_ids):
        end = start + boot + (j // phones + 1) * grade.beta
        ref, n = work(dev)
        delay = int(delays[j]) if delays is not None else 0
        out.append(Emission(dev, grade.grade_id, "device", end, end + delay, ref, n))
    samples: list[MetricSample] = []
    if bench_ids:
        profile = profile or profile_for(grade.grade_id)
        rng = rng if rng is not None else np.random.default_rng(0)
        for dev in bench_ids:
            samples.extend(benchmark_trace(dev, grade.grade_id, profile, start, metric_period, rng))
    return out, samples


# -- operator flows ---------------------------------------------------------

@dataclass
class DeviceContext:
    device_id: int
    params: ModelParams | None
    data: Mapping[str, ClientDataset]


def execute_operator_flow(ctx: DeviceContext, flow: "OperatorFlow") -> tuple[ModelParams | None, int, list[dict]]:
    """Run the steps in order; returns ``(payload, sample_count, per-step stats)``.

    ``custom_sleep`` only contributes its nominal duration to the stats.
    """
    params = ctx.params
    payload = None
    samples = 0
    stats = []
    for step in flow.steps:
        if step.kind == "custom_sleep":
            stats.append({"kind": step.kind, "duration_ms": to_ms(float(step.params.get("sleep_s", 0.0)))})
            continue
        try:
            local = ctx.data[step.dataset_ref]
        except KeyError:
            raise DeviceError(f"dataset {step.dataset_ref} not loaded for device {ctx.device_id}") from None
        if params is None:
            params = ModelParams.zeros(local.X.shape[1])
        if step.kind == "train_lr":
            params, loss = train_local_lr(params, local.X, local.y,
                                          int(step.params.get("epochs", 10)),
                                          float(step.params.get("learning_rate", 1e-3)))
            payload = params
            samples = len(local)
            stats.append({"kind": step.kind, "duration_ms": 0, "rows": len(local), "loss": loss})
        else:
            acc, loss = evaluate(params, local.X, local.y)
            stats.append({"kind": step.kind, "duration_ms": 0, "rows": len(local),
                          "accuracy": acc, "loss": loss})
    return payload, samples, stats
