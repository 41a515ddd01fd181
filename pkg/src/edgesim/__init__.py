"""Discrete-event simulator for device-cloud collaborative computing.

Hybrid logical/phone device emulation with optimal allocation, a traffic
controller that shapes device-to-cloud message flows, FedAvg aggregation
and a greedy multi-task scheduler, all on one integer-millisecond clock.
"""

__version__ = "0.1.0"

from .allocation import (AllocationError, AllocationItem, AllocationPlan,  # noqa: E402
                         brute_force_allocation, device_duration, logical_duration,
                         ratio_allocation, solve_allocation)
from .engine import Engine, stream  # noqa: E402
from .model import (GradeSpec, SpecError, TaskSpec, load_task_spec, parse_task_spec,  # noqa: E402
                    validate_task_spec)

__all__ = [
    "AllocationError", "AllocationItem", "AllocationPlan", "Engine", "GradeSpec", "SpecError",
    "TaskSpec", "brute_force_allocation", "device_duration", "load_task_spec", "logical_duration",
    "parse_task_spec", "ratio_allocation", "solve_allocation", "stream", "validate_task_spec",
]
