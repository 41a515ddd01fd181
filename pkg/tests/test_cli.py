import json
import subprocess
import sys

from conftest import task_doc
from edgesim.allocation import items_from, solve_allocation
from edgesim.cli import main
from edgesim.model import load_task_spec

TWO_GRADES = [
    {"grade_id": "High", "k": 8, "f": 80, "m": 4, "alpha_s": 120, "beta_s": 180, "lambda_s": 60,
     "N": 100, "q": 5},
    {"grade_id": "Low", "k": 1, "f": 20, "m": 6, "alpha_s": 60, "beta_s": 120, "lambda_s": 60,
     "N": 50, "q": 2},
]


def test_validate_exit_codes(write_spec, capsys):
    assert main(["validate", str(write_spec(task_doc()))]) == 0
    bad = write_spec(task_doc(rounds=0), "bad.json")
    assert main(["validate", str(bad)]) == 1
    assert "rounds must be >= 1" in capsys.readouterr().err
    garbled = write_spec(task_doc(), "g.json")
    garbled.write_text("{", encoding="utf-8")
    assert main(["validate", str(garbled)]) == 1


def test_allocate_matches_library(write_spec, capsys):
    path = write_spec(task_doc(grades=TWO_GRADES))
    assert main(["allocate", str(path)]) == 0
    out = capsys.readouterr().out
    printed = json.loads(out.strip().splitlines()[-1])
    spec = load_task_spec(path)
    assert printed == solve_allocation(items_from(spec.grades, spec.demand)).to_dict()
    assert printed["x"] == {"High": 80, "Low": 48}


def test_run_twice_is_byte_identical(write_spec, tmp_path):
    doc = task_doc(rounds=2, seed=5, grades=[dict(TWO_GRADES[1], N=30, q=2)],
                   operator_flow=[{"kind": "train_lr", "dataset_ref": "synthetic:rows=600,dim=32",
                                   "params": {"learning_rate": 0.3}}],
                   dispatch_strategy={"type": "realtime_accumulated", "thresholds": [3, 5], "p_fail": 0.2},
                   response_delay={"type": "right_tail_normal", "sigma": 1, "scale_s": 10})
    path = write_spec(doc)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["run", str(path), "--out", str(out)]) == 0
    for name in ("traffic.csv", "metrics.csv", "aggregation.csv", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    assert main(["run", str(path), "--out", str(tmp_path / "c"), "--seed", "6"]) == 0
    assert (tmp_path / "c" / "traffic.csv").read_bytes() != (outs[0] / "traffic.csv").read_bytes()
    assert main(["report", str(outs[0])]) == 0


def test_out_dir_env_override_is_echoed(write_spec, tmp_path, monkeypatch):
    target = tmp_path / "from-env"
    monkeypatch.setenv("EDGESIM_OUT", str(target))
    assert main(["run", str(write_spec(task_doc())), "--out", str(tmp_path / "ignored")]) == 0
    report = json.loads((target / "report.json").read_text())
    assert report["output_dir_env"] == {"EDGESIM_OUT": str(target)}
    assert not (tmp_path / "ignored").exists()


def test_run_batch_and_report(write_spec, tmp_path, capsys):
    a = write_spec(task_doc(task_id="a", priority=1), "a.json")
    b = write_spec(task_doc(task_id="b", dispatch_strategy={
        "type": "time_interval", "rate_fn": {"type": "normal_pdf", "mu": 0, "sigma": 1},
        "domain": [-4, 4], "interval": {"duration_s": 10}}), "b.json")
    pool = tmp_path / "pool.json"
    pool.write_text(json.dumps({"grades": {"High": {"bundles": 4, "phones": 2}}}))
    out = tmp_path / "out"
    assert main(["run-batch", str(a), str(b), "--pool", str(pool), "--out", str(out)]) == 0
    batch = json.loads((out / "batch.json").read_text())
    assert [x["task_id"] for x in batch["admissions"]] == ["a", "b"]
    assert main(["report", str(out)]) == 0
    assert "curve fidelity" in capsys.readouterr().out


def test_run_batch_bad_pool(write_spec, tmp_path):
    pool = tmp_path / "pool.json"
    pool.write_text(json.dumps({"High": 3}))
    assert main(["run-batch", str(write_spec(task_doc())), "--pool", str(pool), "--out", str(tmp_path)]) == 1


def test_runtime_failure_exit_code(write_spec, tmp_path):
    data = tmp_path / "broken.npz"
    data.write_bytes(b"junk")
    path = write_spec(task_doc(operator_flow=[{"kind": "train_lr", "dataset_ref": "broken.npz"}]))
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["status"] == "failed"


def test_gen_data(tmp_path):
    out = tmp_path / "d.npz"
    assert main(["gen-data", "--rows", "200", "--dim", "16", "--out", str(out)]) == 0
    spec_doc = task_doc(operator_flow=[{"kind": "train_lr", "dataset_ref": "d.npz"}])
    (tmp_path / "s.json").write_text(json.dumps(spec_doc))
    assert main(["validate", str(tmp_path / "s.json")]) == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "edgesim", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run-batch" in res.stdout
