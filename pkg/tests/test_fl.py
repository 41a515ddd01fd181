import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from edgesim.engine import stream
from edgesim.fl import (CsvSchema, Dataset, DatasetError, IidPartition, ModelParams, SkewedPartition,
                        check_dataset_ref, evaluate, generate_synthetic_ctr, hash_bucket,
                        ingest_csv, load_dataset, load_dataset_ref, lr_loss, lr_loss_and_grad,
                        parse_synthetic_ref, partition, partition_from_dict, save_dataset,
                        split_holdout, train_local_lr)


def random_problem(seed, n=40, d=7):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (rng.random(n) < 0.4).astype(float)
    return ModelParams(rng.normal(size=d), float(rng.normal())), X, y


def finite_difference(params, X, y, eps=1e-6):
    g = np.zeros(params.dim)
    for j in range(params.dim):
        up, dn = params.copy(), params.copy()
        up.weights[j] += eps
        dn.weights[j] -= eps
        g[j] = (lr_loss(up, X, y) - lr_loss(dn, X, y)) / (2 * eps)
    up, dn = params.copy(), params.copy()
    up.bias += eps
    dn.bias -= eps
    return g, (lr_loss(up, X, y) - lr_loss(dn, X, y)) / (2 * eps)


@given(st.integers(0, 10**6))
def test_gradient_matches_finite_differences(seed):
    params, X, y = random_problem(seed)
    _, gw, gb = lr_loss_and_grad(params, X, y)
    fw, fb = finite_difference(params, X, y)
    num = np.concatenate([gw, [gb]])
    ref = np.concatenate([fw, [fb]])
    assert np.linalg.norm(num - ref) <= 1e-5 * max(1.0, np.linalg.norm(ref))


def test_sparse_and_dense_gradients_agree():
    params, X, y = random_problem(3)
    a = lr_loss_and_grad(params, X, y)
    b = lr_loss_and_grad(params, sp.csr_matrix(X), y)
    assert a[0] == pytest.approx(b[0]) and np.allclose(a[1], b[1]) and a[2] == pytest.approx(b[2])


def test_training_reduces_loss():
    _, X, y = random_problem(1, n=200)
    start = ModelParams.zeros(X.shape[1])
    trained, loss = train_local_lr(start, X, y, epochs=50, lr=0.5)
    assert loss < lr_loss(start, X, y)
    assert np.array_equal(start.weights, np.zeros(X.shape[1]))  # input untouched


def test_training_overflow_is_reported():
    X = np.array([[1e200], [-1e200]])
    with pytest.raises(FloatingPointError):
        train_local_lr(ModelParams(np.array([1e200]), 0.0), X, np.array([0.0, 1.0]), 1, 1.0)


def test_zero_model_predicts_negative():
    X = np.eye(4)
    acc, loss = evaluate(ModelParams.zeros(4), X, np.array([0, 0, 0, 1.0]))
    assert acc == 0.75 and loss == pytest.approx(np.log(2))


# -- data ---------------------------------------------------------------------------

def test_synthetic_rate_and_determinism():
    a = generate_synthetic_ctr(20_000, 128, stream(0, "synthetic"))
    b = generate_synthetic_ctr(20_000, 128, stream(0, "synthetic"))
    assert (a.X != b.X).nnz == 0 and np.array_equal(a.y, b.y)
    assert abs(a.positive_fraction - 0.25) < 0.02
    assert a.X.shape == (20_000, 128) and np.allclose(a.X.sum(axis=1), 8)


def test_hash_bucket_is_stable():
    assert hash_bucket("site", "a", 1024) == hash_bucket("site", "a", 1024)
    assert 0 <= hash_bucket("site", "zzz", 7) < 7


def test_holdout_split_is_disjoint():
    ds = generate_synthetic_ctr(500, 32, stream(0, "s"))
    tr, te = split_holdout(ds, 0.2, stream(0, "h"))
    assert len(tr) + len(te) == 500 and len(te) == 100


def test_iid_partition_covers_every_row_once():
    ds = generate_synthetic_ctr(1000, 32, stream(0, "s"))
    parts = partition(ds, 30, IidPartition(), stream(0, "p"))
    rows = np.concatenate([p.rows for p in parts])
    assert sorted(rows.tolist()) == list(range(1000))
    assert {len(p) for p in parts} <= {33, 34}


def test_skewed_partition_proportions():
    ds = generate_synthetic_ctr(20_000, 64, stream(0, "s"))
    spec = SkewedPartition(0.7, 0.9, 0.1)
    parts = partition(ds, 100, spec, stream(0, "p"))
    fracs = np.array([p.positive_fraction for p in parts])
    high = fracs > 0.5
    assert high.sum() == 70
    assert abs(fracs[high].mean() - 0.9) < 0.05
    assert abs(fracs[~high].mean() - 0.1) < 0.05
    rows = np.concatenate([p.rows for p in parts])
    assert len(rows) == len(set(rows.tolist())) == len(ds)


def test_partition_errors():
    ds = generate_synthetic_ctr(10, 8, stream(0, "s"))
    with pytest.raises(DatasetError, match="too few rows"):
        partition(ds, 11, IidPartition(), stream(0, "p"))
    y = np.zeros(100)
    y[:2] = 1
    skew = Dataset(sp.csr_matrix(np.ones((100, 2))), y)
    with pytest.raises(DatasetError, match="outside"):
        partition(skew, 10, SkewedPartition(), stream(0, "p"))
    with pytest.raises(DatasetError):
        partition_from_dict({"type": "dirichlet"})


def test_csv_ingest(tmp_path):
    p = tmp_path / "clicks.csv"
    p.write_text("uid,site,ad,click\nb,x,1,0\na,y,2,1\nb,z,1,1\n", encoding="utf-8")
    schema = CsvSchema("click", ("site", "ad"), "uid", 64)
    ds = ingest_csv(p, schema)
    assert ds.device_ids.tolist() == ["b", "b", "a"]
    assert ds.y.tolist() == [0.0, 1.0, 1.0]
    assert ds.X[0, hash_bucket("site", "x", 64)] >= 1
    bad = tmp_path / "bad.csv"
    bad.write_text("site,ad,click\nx,1,0\ny,2\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="line 3"):
        ingest_csv(bad, CsvSchema("click", ("site", "ad")))
    with pytest.raises(DatasetError, match="unknown column 'country'"):
        ingest_csv(p, CsvSchema("click", ("country",)))


def test_npz_round_trip(tmp_path):
    ds = generate_synthetic_ctr(300, 16, stream(2, "s"))
    save_dataset(ds, tmp_path / "d.npz")
    back = load_dataset(tmp_path / "d.npz")
    assert (back.X != ds.X).nnz == 0 and np.array_equal(back.y, ds.y)
    assert back.true_params.allclose(ds.true_params)


def test_dataset_refs(tmp_path):
    assert parse_synthetic_ref("synthetic:rows=50,dim=8,seed=3")["seed"] == 3
    with pytest.raises(DatasetError):
        parse_synthetic_ref("synthetic:dim=8")
    with pytest.raises(DatasetError):
        check_dataset_ref("nowhere.npz", tmp_path)
    csv_path = tmp_path / "c.csv"
    csv_path.write_text("site,click\na,1\nb,0\n", encoding="utf-8")
    with pytest.raises(DatasetError, match="schema"):
        check_dataset_ref("c.csv", tmp_path)
    (tmp_path / "c.csv.schema.json").write_text(
        json.dumps({"label_column": "click", "categorical_columns": ["site"], "hash_dim": 8}))
    assert len(load_dataset_ref("c.csv", tmp_path)) == 2
    assert load_dataset_ref("synthetic:rows=50,dim=8").X.shape == (50, 8)
