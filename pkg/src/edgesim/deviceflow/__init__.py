"""Device-behaviour traffic control between edge emissions and the cloud."""

from .compile import (CompiledDispatchPlan, PlanPoint, compile_time_interval, largest_remainder,
                      plan_from_time_points, step_auc)
from .dispatch import Dispatcher, Pacer, Shelf, ShelfMessage, Sorter, apply_dropout
from .strategy import (ABSOLUTE, DEFAULT_CAPACITY, RELATIVE, DispatchStrategySpec, Dropout,
                       RateFunctionSpec, RateSegment, RateTerm, RealTimeAccumulated, StrategyError,
                       TimeInterval, TimePoint, TimePointEntry, strategy_from_dict, strategy_to_dict)

__all__ = [
    "ABSOLUTE", "DEFAULT_CAPACITY", "RELATIVE", "CompiledDispatchPlan", "Dispatcher",
    "DispatchStrategySpec", "Dropout", "Pacer", "PlanPoint", "RateFunctionSpec", "RateSegment",
    "RateTerm", "RealTimeAccumulated", "Shelf", "ShelfMessage", "Sorter", "StrategyError",
    "TimeInterval", "TimePoint", "TimePointEntry", "apply_dropout", "compile_time_interval",
    "largest_remainder", "plan_from_time_points", "step_auc", "strategy_from_dict",
    "strategy_to_dict",
]
