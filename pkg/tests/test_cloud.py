import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from edgesim.cloud import (CloudService, SampleThreshold, Scheduled, TriggerError, fedavg_aggregate,
                           trigger_from_dict)
from edgesim.deviceflow import ShelfMessage
from edgesim.fl import ModelParams


def mp(*w, b=0.0):
    return ModelParams(np.array(w, dtype=float), b)


def message(ref, n, dev=0):
    return ShelfMessage("t", 0, dev, "High", n, ref, 0)


def test_fedavg_symmetric_pair():
    out = fedavg_aggregate([(mp(1, 3), 5), (mp(3, 1), 5)])
    assert np.allclose(out.weights, [2, 2])


def test_fedavg_single_client_is_identity():
    p = mp(0.5, -2, b=0.25)
    out = fedavg_aggregate([(p, 9)])
    assert np.array_equal(out.weights, p.weights) and out.bias == p.bias


def test_fedavg_against_direct_weighted_sum():
    ws = [mp(1, 0, b=1), mp(0, 1, b=2), mp(2, 2, b=-1)]
    counts = [1, 2, 7]
    out = fedavg_aggregate(list(zip(ws, counts)))
    # direct arithmetic: (1*w1 + 2*w2 + 7*w3) / 10
    assert np.allclose(out.weights, [(1 * 1 + 7 * 2) / 10, (2 * 1 + 7 * 2) / 10])
    assert out.bias == pytest.approx((1 * 1 + 2 * 2 - 7) / 10)


def test_fedavg_zero_counts_fall_back(caplog):
    with caplog.at_level(logging.WARNING):
        out = fedavg_aggregate([(mp(0, 2), 0), (mp(2, 0), 0)])
    assert np.allclose(out.weights, [1, 1])
    assert "unweighted" in caplog.text


def test_fedavg_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        fedavg_aggregate([(mp(1, 2), 1), (mp(1), 1)])


@given(st.lists(st.tuples(st.lists(st.floats(-100, 100), min_size=3, max_size=3),
                          st.integers(0, 50)), min_size=1, max_size=8))
def test_fedavg_stays_within_client_bounds(clients):
    buffered = [(mp(*w), n) for w, n in clients]
    out = fedavg_aggregate(buffered)
    W = np.array([w for w, _ in clients])
    assert (out.weights >= W.min(axis=0) - 1e-9).all()
    assert (out.weights <= W.max(axis=0) + 1e-9).all()


def test_receive_buffers_and_counts_samples():
    store = {f"r{i}": mp(i) for i in range(100)}
    cloud = CloudService(SampleThreshold(10**6), store)
    cloud.receive_message(message("r0", 3), 0)
    assert len(cloud.buffer) == 1
    for i in range(1, 100):
        cloud.receive_message(message(f"r{i}", i), 0)
    assert cloud.buffered_samples == 3 + sum(range(1, 100))


def test_dangling_ref_is_corrupt():
    cloud = CloudService(SampleThreshold(1), {})
    cloud.receive_message(message("gone", 5), 0)
    assert cloud.buffer == [] and cloud.corrupt == 1 and cloud.model.version == 0


def test_threshold_semantics():
    store = {"a": mp(1), "b": mp(3)}
    cloud = CloudService(SampleThreshold(100), store, mp(0))
    cloud.receive_message(message("a", 99), 0)
    assert cloud.model.version == 0
    cloud.receive_message(message("b", 51), 7)
    assert cloud.model.version == 1
    h = cloud.model.history[-1]
    assert (h.samples, h.messages, h.t_ms) == (150, 2, 7)
    assert cloud.buffer == []


def test_scheduled_boundary_skips_empty_buffer():
    cloud = CloudService(Scheduled(1000), {"a": mp(1)}, mp(0))
    assert cloud.maybe_aggregate(1000, at_boundary=True) is None
    cloud.receive_message(message("a", 4), 1500)
    assert cloud.model.version == 0  # waits for the boundary
    assert cloud.maybe_aggregate(2000, at_boundary=True).version == 1


def test_flush_is_flagged():
    cloud = CloudService(SampleThreshold(100), {"a": mp(1)}, mp(0))
    cloud.receive_message(message("a", 4), 0)
    entry = cloud.flush(9)
    assert entry.flush and entry.samples == 4
    assert cloud.flush(10) is None


def test_trigger_parsing():
    assert trigger_from_dict({"type": "scheduled", "period_s": 1.5}) == Scheduled(1500)
    with pytest.raises(TriggerError):
        trigger_from_dict({"type": "sample_threshold", "samples": 0})
    with pytest.raises(TriggerError):
        trigger_from_dict({"type": "scheduled", "period_s": 0})
