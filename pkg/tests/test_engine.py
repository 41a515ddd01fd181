import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgesim.engine import Engine, EngineError, label_key, stream, to_ms


def test_to_ms_rounds_half_away_from_zero():
    assert to_ms(1.5) == 1500
    assert to_ms(0.0005) == 1
    assert to_ms(-0.0005) == -1
    assert to_ms(0.0004) == 0


def test_same_time_events_fire_in_scheduling_order():
    eng = Engine()
    seen = []
    for name in "abc":
        eng.schedule(5, seen.append, name)
    eng.schedule(1, seen.append, "first")
    eng.run_until()
    assert seen == ["first", "a", "b", "c"]
    assert eng.now == 5


def test_run_until_is_inclusive_and_advances_clock():
    eng = Engine()
    seen = []
    eng.schedule(10, seen.append, 10)
    eng.schedule(11, seen.append, 11)
    stats = eng.run_until(10)
    assert seen == [10] and stats.processed == 1 and eng.now == 10
    eng.run_until(50)
    assert seen == [10, 11] and eng.now == 50


def test_scheduling_in_the_past_is_rejected():
    eng = Engine()
    eng.schedule(10, lambda _: None)
    eng.run_until()
    with pytest.raises(EngineError):
        eng.schedule(9, lambda _: None)


def test_handler_errors_carry_the_event():
    eng = Engine()

    def boom(_):
        raise ValueError("bad")

    eng.schedule(3, boom, "p")
    with pytest.raises(EngineError) as info:
        eng.run_until()
    assert info.value.event.fire_time == 3
    assert info.value.event.payload == "p"


def test_handlers_can_schedule_more_events():
    eng = Engine()
    seen = []

    def tick(n):
        seen.append(eng.now)
        if n:
            eng.schedule_in(2, tick, n - 1)

    eng.schedule(0, tick, 3)
    eng.run_until()
    assert seen == [0, 2, 4, 6]
    assert eng.processed == 4


@given(st.lists(st.integers(0, 1000), min_size=1, max_size=60))
def test_events_fire_in_nondecreasing_time(times):
    eng = Engine()
    fired = []
    for i, t in enumerate(times):
        eng.schedule(t, lambda p: fired.append((eng.now, p)), i)
    eng.run_until()
    assert [t for t, _ in fired] == sorted(times)
    # ties keep submission order
    assert fired == sorted(fired)


def test_streams_are_reproducible_and_independent():
    a = stream(1, "delay", 0).random(5)
    assert np.array_equal(a, stream(1, "delay", 0).random(5))
    assert not np.array_equal(a, stream(1, "delay", 1).random(5))
    assert not np.array_equal(a, stream(1, "dropout", 0).random(5))
    assert not np.array_equal(a, stream(2, "delay", 0).random(5))


def test_label_key_is_stable():
    # blake2b with an 8-byte digest, little endian; frozen so traces stay comparable
    assert label_key("delay") == label_key("delay")
    assert label_key("delay") != label_key("dropout")
    assert 0 <= label_key("x") < 2**64
