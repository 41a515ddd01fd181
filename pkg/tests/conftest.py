import json
from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def grade_doc(grade_id="High", k=1, f=4, m=2, alpha_s=1.0, beta_s=2.0, lambda_s=0.0, N=8, q=0):
    return {"grade_id": grade_id, "k": k, "f": f, "m": m, "alpha_s": alpha_s, "beta_s": beta_s,
            "lambda_s": lambda_s, "N": N, "q": q}


def task_doc(**over):
    doc = {
        "task_id": "t1",
        "rounds": 1,
        "grades": [grade_doc()],
        "operator_flow": [{"kind": "custom_sleep", "params": {"sleep_s": 1}}],
        "dispatch_strategy": {"type": "realtime_accumulated", "thresholds": [1]},
        "aggregation_trigger": {"type": "sample_threshold", "samples": 1},
    }
    doc.update(over)
    return doc


@pytest.fixture
def write_spec(tmp_path):
    def _write(doc, name="spec.json") -> Path:
        p = tmp_path / name
        p.write_text(json.dumps(doc), encoding="utf-8")
        return p
    return _write


# -- acceptance reporting -----------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, title)`` are grouped by n; the
# terminal summary prints one PASS/FAIL line per criterion that ran.

_criterion_of: dict[str, tuple[int, str]] = {}
_criterion_result: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by a test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _criterion_of[item.nodeid] = (mark.args[0], mark.args[1])


def pytest_runtest_logreport(report):
    hit = _criterion_of.get(report.nodeid)
    if hit is None:
        return
    n = hit[0]
    if report.failed:
        _criterion_result[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _criterion_result.setdefault(n, "PASS")
    elif report.skipped:
        _criterion_result.setdefault(n, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _criterion_result:
        return
    titles = {n: t for n, t in _criterion_of.values()}
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criterion_result):
        terminalreporter.write_line(f"criterion {n:>2} {_criterion_result[n]}: {titles[n]}")
