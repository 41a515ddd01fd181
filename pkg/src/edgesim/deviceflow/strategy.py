"""Dispatch strategy specifications and user-defined rate functions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Union

import numpy as np
from numpy.polynomial import polynomial as P

from ..engine import to_ms

DEFAULT_CAPACITY = 700

RELATIVE = "relative"
ABSOLUTE = "absolute"
_TIME_BASES = (RELATIVE, ABSOLUTE)


class StrategyError(ValueError):
    pass


def _take(d: dict, key: str, where: str, default: Any = ...):
    if key in d:
        return d[key]
    if default is ...:
        raise StrategyError(f"{where}: missing required field '{key}'")
    return default


def _strict(d: Any, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise StrategyError(f"{where}: expected an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise StrategyError(f"{where}: unknown field '{extra[0]}'")
    return d


def _prob(p: float, where: str) -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise StrategyError(f"{where}: probability {p} outside [0, 1]")
    return p


def _count(n: Any, where: str) -> int:
    if isinstance(n, bool) or not isinstance(n, int) or n < 0:
        raise StrategyError(f"{where}: expected a non-negative integer, got {n!r}")
    return n


# -- rate functions ---------------------------------------------------------

_FN_KINDS = {
    "normal_pdf": {"mu", "sigma"},
    "sin_plus_1": set(),
    "cos_plus_1": set(),
    "exp_base": {"base"},
    "constant": {"value"},
    "polynomial": {"coeffs"},
}


@dataclass(frozen=True)
class RateTerm:
    kind: str
    args: tuple[float, ...] = ()

    def __call__(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k, a = self.kind, self.args
        if k == "normal_pdf":
            mu, sigma = a
            return np.exp(-0.5 * ((t - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
        if k == "sin_plus_1":
            return np.sin(t) + 1.0
        if k == "cos_plus_1":
            return np.cos(t) + 1.0
        if k == "exp_base":
            return np.power(a[0], t)
        if k == "constant":
            return np.full_like(t, a[0])
        if k == "polynomial":
            return P.polyval(t, np.asarray(a))
        raise StrategyError(f"unknown rate function '{k}'")

    def to_dict(self) -> dict:
        k, a = self.kind, self.args
        if k == "normal_pdf":
            return {"type": k, "mu": a[0], "sigma": a[1]}
        if k == "exp_base":
            return {"type": k, "base": a[0]}
        if k == "constant":
            return {"type": k, "value": a[0]}
        if k == "polynomial":
            return {"type": k, "coeffs": list(a)}
        return {"type": k}

    @classmethod
    def from_dict(cls, d: dict) -> "RateTerm":
        kind = _take(d, "type", "rate function")
        if kind not in _FN_KINDS:
            raise StrategyError(f"unknown rate function '{kind}'")
        _strict(d, _FN_KINDS[kind] | {"type"}, f"rate function {kind}")
        if kind == "normal_pdf":
            sigma = float(_take(d, "sigma", kind))
            if sigma <= 0:
                raise StrategyError("normal_pdf: sigma must be positive")
            return cls(kind, (float(_take(d, "mu", kind, 0.0)), sigma))
        if kind == "exp_base":
            base = float(_take(d, "base", kind))
            if base <= 0:
                raise StrategyError("exp_base: base must be positive")
            return cls(kind, (base,))
        if kind == "constant":
            return cls(kind, (float(_take(d, "value", kind)),))
        if kind == "polynomial":
            coeffs = tuple(float(c) for c in _take(d, "coeffs", kind))
            if not coeffs:
                raise StrategyError("polynomial: coeffs must be nonempty")
            return cls(kind, coeffs)
        return cls(kind)


@dataclass(frozen=True)
class RateSegment:
    lo: float
    hi: float
    term: RateTerm


@dataclass(frozen=True)
class RateFunctionSpec:
    """Piecewise rate ``y = f(t)``; the first segment containing ``t`` wins.

    Polynomial coefficients are lowest order first (``c0 + c1 t + ...``).
    """

    segments: tuple[RateSegment, ...]

    @classmethod
    def single(cls, term: RateTerm, lo: float, hi: float) -> "RateFunctionSpec":
        return cls((RateSegment(lo, hi, term),))

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, np.nan)
        unset = np.ones(t.shape, dtype=bool)
        for seg in self.segments:
            sel = unset & (t >= seg.lo) & (t <= seg.hi)
            if sel.any():
                out[sel] = seg.term(t[sel])
                unset &= ~sel
        return out

    def check(self, a: float, b: float, samples: int = 4097) -> None:
        """Reject functions that are undefined, unbounded or negative on ``[a, b]``."""
        t = np.linspace(a, b, samples)
        y = self(t)
        if np.isnan(y).any():
            raise StrategyError(f"rate function undefined somewhere on [{a}, {b}]")
        if not np.isfinite(y).all():
            raise StrategyError("rate function is unbounded on its domain")
        if (y < 0).any():
            raise StrategyError("rate function is negative on its domain")

    def to_dict(self) -> dict:
        return {"segments": [{"domain": [s.lo, s.hi], "fn": s.term.to_dict()} for s in self.segments]}

    @classmethod
    def from_dict(cls, d: dict, domain: tuple[float, float] | None = None) -> "RateFunctionSpec":
        if "segments" not in d:
            # shorthand: a bare function over the whole strategy domain
            if domain is None:
                raise StrategyError("rate_fn: bare function needs a domain")
            return cls.single(RateTerm.from_dict(d), *domain)
        _strict(d, {"segments"}, "rate_fn")
        segs = []
        for i, s in enumerate(d["segments"]):
            _strict(s, {"domain", "fn"}, f"rate_fn segment {i}")
            lo, hi = (float(v) for v in _take(s, "domain", f"segment {i}"))
            if not lo <= hi:
                raise StrategyError(f"rate_fn segment {i}: empty domain")
            segs.append(RateSegment(lo, hi, RateTerm.from_dict(_take(s, "fn", f"segment {i}"))))
        if not segs:
            raise StrategyError("rate_fn: no segments")
        return cls(tuple(segs))


# -- strategies -------------------------------------------------------------

@dataclass(frozen=True)
class Dropout:
    p_fail: float = 0.0
    discard: int = 0


@dataclass(frozen=True)
class TimePointEntry:
    t: int  # ms
    count: int
    dropout: Dropout = Dropout()


@dataclass(frozen=True)
class RealTimeAccumulated:
    thresholds: tuple[int, ...] = (1,)
    p_fail: float = 0.0
    capacity_per_sec: int = DEFAULT_CAPACITY

    rule_based = False

    def __post_init__(self):
        if not self.thresholds or any(int(s) < 1 for s in self.thresholds):
            raise StrategyError("thresholds must be a nonempty list of positive integers")
        _prob(self.p_fail, "realtime_accumulated")
        if self.capacity_per_sec < 1:
            raise StrategyError("capacity_per_sec must be at least 1")


@dataclass(frozen=True)
class TimePoint:
    points: tuple[TimePointEntry, ...]
    time_base: str = RELATIVE
    capacity_per_sec: int = DEFAULT_CAPACITY

    rule_based = True

    def __post_init__(self):
        if self.time_base not in _TIME_BASES:
            raise StrategyError(f"time_base must be one of {_TIME_BASES}")
        if self.capacity_per_sec < 1:
            raise StrategyError("capacity_per_sec must be at least 1")


@dataclass(frozen=True)
class TimeInterval:
    rate_fn: RateFunctionSpec
    domain: tuple[float, float]
    start: int  # ms
    duration: int  # ms, the interval length Δ
    time_base: str = RELATIVE
    dropout: Dropout = Dropout()
    capacity_per_sec: int = DEFAULT_CAPACITY

    rule_based = True

    def __post_init__(self):
        a, b = self.domain
        if not a < b:
            raise StrategyError("time_interval: domain must satisfy a < b")
        if self.duration <= 0:
            raise StrategyError("time_interval: duration must be positive")
        if self.time_base not in _TIME_BASES:
            raise StrategyError(f"time_base must be one of {_TIME_BASES}")
        if self.capacity_per_sec < 1:
            raise StrategyError("capacity_per_sec must be at least 1")
        self.rate_fn.check(a, b)


DispatchStrategySpec = Union[RealTimeAccumulated, TimePoint, TimeInterval]


def _dropout_from(d: dict | None, where: str) -> Dropout:
    if d is None:
        return Dropout()
    _strict(d, {"p_fail", "discard"}, where)
    return Dropout(_prob(d.get("p_fail", 0.0), where), _count(d.get("discard", 0), where))


def strategy_from_dict(d: dict) -> DispatchStrategySpec:
    kind = _take(d, "type", "dispatch_strategy")
    cap = d.get("capacity_per_sec", DEFAULT_CAPACITY)
    if kind == "realtime_accumulated":
        _strict(d, {"type", "thresholds", "p_fail", "capacity_per_sec"}, kind)
        thresholds = tuple(_count(s, kind) for s in _take(d, "thresholds", kind))
        return RealTimeAccumulated(thresholds, _prob(d.get("p_fail", 0.0), kind), cap)
    if kind == "time_point":
        _strict(d, {"type", "points", "time_base", "capacity_per_sec"}, kind)
        pts = []
        for i, p in enumerate(_take(d, "points", kind)):
            where = f"time_point point {i}"
            _strict(p, {"t_s", "count", "p_fail", "discard"}, where)
            pts.append(TimePointEntry(
                to_ms(float(_take(p, "t_s", where))),
                _count(_take(p, "count", where), where),
                Dropout(_prob(p.get("p_fail", 0.0), where), _count(p.get("discard", 0), where)),
            ))
        return TimePoint(tuple(pts), d.get("time_base", RELATIVE), cap)
    if kind == "time_interval":
        _strict(d, {"type", "rate_fn", "domain", "interval", "time_base", "dropout",
                    "capacity_per_sec"}, kind)
        a, b = (float(v) for v in _take(d, "domain", kind))
        rate = RateFunctionSpec.from_dict(_take(d, "rate_fn", kind), (a, b))
        iv = _strict(_take(d, "interval", kind), {"start_s", "duration_s"}, "interval")
        return TimeInterval(
            rate, (a, b),
            to_ms(float(iv.get("start_s", 0.0))),
            to_ms(float(_take(iv, "duration_s", "interval"))),
            d.get("time_base", RELATIVE),
            _dropout_from(d.get("dropout"), "time_interval dropout"),
            cap,
        )
    raise StrategyError(f"unknown dispatch strategy '{kind}'")


def strategy_to_dict(s: DispatchStrategySpec) -> dict:
    if isinstance(s, RealTimeAccumulated):
        return {"type": "realtime_accumulated", "thresholds": list(s.thresholds),
                "p_fail": s.p_fail, "capacity_per_sec": s.capacity_per_sec}
    if isinstance(s, TimePoint):
        return {"type": "time_point", "time_base": s.time_base,
                "capacity_per_sec": s.capacity_per_sec,
                "points": [{"t_s": p.t / 1000.0, "count": p.count, "p_fail": p.dropout.p_fail,
                            "discard": p.dropout.discard} for p in s.points]}
    return {"type": "time_interval", "rate_fn": s.rate_fn.to_dict(), "domain": list(s.domain),
            "interval": {"start_s": s.start / 1000.0, "duration_s": s.duration / 1000.0},
            "time_base": s.time_base, "capacity_per_sec": s.capacity_per_sec,
            "dropout": {"p_fail": s.dropout.p_fail, "discard": s.dropout.discard}}
