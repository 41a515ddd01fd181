import pytest
from hypothesis import given, strategies as st

from conftest import grade_doc, task_doc
from edgesim.fl import generate_synthetic_ctr, save_dataset
from edgesim.engine import stream
from edgesim.model import spec_from_dict
from edgesim.resources import (PoolError, ResourcePool, SchedulerError, TaskManager, TaskStatus,
                               tick_schedule)
from edgesim.runner import run_batch, run_task


def spec(task_id="t1", priority=0, **grade):
    return spec_from_dict(task_doc(task_id=task_id, priority=priority, grades=[grade_doc(**grade)]))


def test_enqueue_sequence_and_duplicates():
    tm = TaskManager(ResourcePool({"High": (4, 2)}))
    a = tm.enqueue(spec("a"))
    b = tm.enqueue(spec("b"))
    assert (a.submit_seq, a.status) == (0, TaskStatus.QUEUED)
    assert b.submit_seq > a.submit_seq
    with pytest.raises(SchedulerError, match="duplicate"):
        tm.enqueue(spec("a"))


def test_enqueue_rejects_invalid():
    tm = TaskManager(ResourcePool({"Low": (4, 2)}))
    with pytest.raises(SchedulerError, match="missing from pool"):
        tm.enqueue(spec("a"))


def test_empty_queue_tick():
    assert tick_schedule(TaskManager(ResourcePool({"High": (4, 2)}))) == []


def test_exact_fit_drains_pool():
    pool = ResourcePool({"High": (4, 0)})
    tm = TaskManager(pool)
    tm.enqueue(spec("a", f=4, m=0, N=4))
    decisions = tm.tick_schedule()
    assert [d.task_id for d in decisions] == ["a"]
    assert pool.capacity("High").bundles_free == 0
    assert tm.records["a"].status is TaskStatus.RUNNING


def test_unfit_high_priority_does_not_block():
    pool = ResourcePool({"High": (4, 0)})
    tm = TaskManager(pool)
    tm.enqueue(spec("holder", priority=9, f=2, m=0, N=2))
    assert [d.task_id for d in tm.tick_schedule()] == ["holder"]
    # 2 bundles left: one device of 'big' needs 4, 'small' needs 1 each
    tm.enqueue(spec("big", priority=9, k=4, f=4, m=0, N=1))
    tm.enqueue(spec("small", priority=1, f=2, m=0, N=2))
    assert [d.task_id for d in tm.tick_schedule()] == ["small"]
    assert tm.records["big"].status is TaskStatus.QUEUED
    tm.finish("holder", True)
    tm.finish("small", True)
    assert [d.task_id for d in tm.tick_schedule()] == ["big"]


def test_priority_then_submission_order():
    pool = ResourcePool({"High": (2, 0)})
    tm = TaskManager(pool)
    tm.enqueue(spec("low", priority=0, f=2, m=0, N=2))
    tm.enqueue(spec("high", priority=5, f=2, m=0, N=2))
    tm.enqueue(spec("high2", priority=5, f=2, m=0, N=2))
    assert [d.task_id for d in tm.tick_schedule()] == ["high"]
    tm.finish("high", True)
    assert [d.task_id for d in tm.tick_schedule()] == ["high2"]


def test_declared_resources_are_clamped_to_free():
    pool = ResourcePool({"High": (3, 1)})
    tm = TaskManager(pool)
    tm.enqueue(spec("a", k=2, f=8, m=4, N=6))
    (d,) = tm.tick_schedule()
    assert d.grades[0].f == 2 and d.grades[0].m == 1


def test_freeze_release_restores_pool():
    pool = ResourcePool({"a": (10, 5), "b": (3, 3)})
    start = pool.snapshot()
    la = pool.freeze("A", {"a": (4, 1)})
    lb = pool.freeze("B", {"a": (6, 2), "b": (3, 0)})
    with pytest.raises(PoolError):
        pool.freeze("C", {"a": (1, 0)})
    pool.release(lb)
    pool.release(la)
    assert pool.snapshot() == start
    with pytest.raises(PoolError, match="already released"):
        pool.release(la)


def test_illegal_transition():
    tm = TaskManager(ResourcePool({"High": (4, 2)}))
    tm.enqueue(spec("a"))
    with pytest.raises(SchedulerError):
        tm.finish("a", True)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 3), st.booleans()), max_size=40))
def test_random_freeze_release_never_overallocates(ops):
    pool = ResourcePool({"g": (10, 6)})
    leases = []
    for b, p, release in ops:
        if release and leases:
            pool.release(leases.pop(0))
        else:
            try:
                leases.append(pool.freeze("t", {"g": (b, p)}))
            except PoolError:
                pass
        pool.check()
    for lease in leases:
        pool.release(lease)
    assert pool.snapshot() == {"g": (10, 10, 6, 6)}


# -- run_task ---------------------------------------------------------------------

def test_single_device_single_round():
    run = run_task(spec_from_dict(task_doc(grades=[grade_doc(N=1)])))
    r = run.report()
    assert r["status"] == "completed"
    assert len(r["rounds"]) == 1 and r["counts"]["emitted"] == 1


def test_three_rounds_end_is_sum_of_spans():
    s = spec_from_dict(task_doc(rounds=3, grades=[grade_doc(N=10, k=1, f=2, m=2, alpha_s=1, beta_s=3,
                                                            lambda_s=2)]))
    run = run_task(s)
    r = run.report()
    assert r["rounds_completed"] == 3
    assert r["rounds"][-1]["end_ms"] == sum(x["span_ms"] for x in r["rounds"])
    # allocation: x logical on 2 slots, rest on 2 phones; round 0 pays lambda
    plan = run.plan
    assert r["rounds"][0]["span_ms"] == plan.t_total


def test_failing_dataset_marks_failed_and_restores_pool(tmp_path):
    data = tmp_path / "d.npz"
    save_dataset(generate_synthetic_ctr(50, 16, stream(0, "synthetic")), data)
    s = spec_from_dict(task_doc(operator_flow=[{"kind": "train_lr", "dataset_ref": str(data)}]))
    pool = ResourcePool.for_spec(s)
    before = pool.snapshot()
    data.write_bytes(b"not an archive")  # exists, so it passes submission; loading fails
    result = run_batch([s], pool)
    run = result.runs["t1"]
    assert run.status == "failed" and run.error
    assert result.manager.records["t1"].status is TaskStatus.FAILED
    assert pool.snapshot() == before and pool.outstanding == []
