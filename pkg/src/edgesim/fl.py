"""Federated-learning workload: logistic regression, CTR data and partitioning.

Categorical values are hashed into ``d`` buckets with
``blake2b64("<column>=<value>") mod d`` and one-hot accumulated, so two
columns landing in the same bucket add up.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

DEFAULT_DIM = 2**10


class DatasetError(ValueError):
    pass


@dataclass
class ModelParams:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls, d: int) -> "ModelParams":
        return cls(np.zeros(d), 0.0)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), float(self.bias))

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return (np.allclose(self.weights, other.weights, rtol=0, atol=atol)
                and abs(self.bias - other.bias) <= atol)


# -- logistic regression ----------------------------------------------------

def _logits(params: ModelParams, X) -> np.ndarray:
    if X.shape[1] != params.dim:
        raise ValueError(f"dimension mismatch: features {X.shape[1]} vs model {params.dim}")
    return np.asarray(X @ params.weights).ravel() + params.bias


def lr_loss(params: ModelParams, X, y) -> float:
    """Mean binary cross-entropy with a sigmoid link."""
    z = _logits(params, X)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def lr_loss_and_grad(params: ModelParams, X, y) -> tuple[float, np.ndarray, float]:
    z = _logits(params, X)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    err = expit(z) - y
    n = len(y)
    grad_w = np.asarray(X.T @ err).ravel() / n
    return loss, grad_w, float(err.sum() / n)


def train_local_lr(params: ModelParams, X, y, epochs: int = 10,
                   lr: float = 1e-3) -> tuple[ModelParams, float]:
    """Full-batch gradient descent; returns the new params and their mean loss."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    w = params.weights.astype(float, copy=True)
    b = float(params.bias)
    cur = ModelParams(w, b)
    with np.errstate(over="ignore", invalid="ignore"):  # checked explicitly below
        for epoch in range(epochs):
            loss, gw, gb = lr_loss_and_grad(cur, X, y)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            cur = ModelParams(cur.weights - lr * gw, cur.bias - lr * gb)
        final = lr_loss(cur, X, y)
    if not np.isfinite(final):
        raise FloatingPointError(f"non-finite loss at epoch {epochs}")
    return cur, final


def predict(params: ModelParams, X) -> np.ndarray:
    return expit(_logits(params, np.atleast_2d(X) if not sp.issparse(X) else X))


def evaluate(params: ModelParams, X, y) -> tuple[float, float]:
    """(accuracy at a strict 0.5 threshold, mean cross-entropy)."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    z = _logits(params, X)
    acc = float(np.mean((z > 0.0) == (y > 0.5)))
    return acc, float(np.mean(np.logaddexp(0.0, z) - y * z))


# -- datasets ---------------------------------------------------------------

Matrix = Union[np.ndarray, sp.csr_matrix]


@dataclass
class Dataset:
    X: Matrix
    y: np.ndarray
    device_ids: np.ndarray | None = None
    true_params: ModelParams | None = None

    def __post_init__(self):
        if self.X.shape[0] != len(self.y):
            raise DatasetError("feature and label row counts differ")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.y)) if len(self.y) else 0.0

    def dense(self, rows=None) -> np.ndarray:
        X = self.X if rows is None else self.X[rows]
        return X.toarray() if sp.issparse(X) else np.asarray(X, dtype=float)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        ids = None if self.device_ids is None else self.device_ids[rows]
        return Dataset(self.X[rows], self.y[rows], ids, self.true_params)


@dataclass
class ClientDataset:
    device_id: int
    X: np.ndarray
    y: np.ndarray
    rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.y)) if len(self.y) else 0.0


def split_holdout(ds: Dataset, test_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must be in (0, 1)")
    perm = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    if n_test >= len(ds):
        raise DatasetError("dataset too small for a holdout split")
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# -- partitioning -----------------------------------------------------------

@dataclass(frozen=True)
class IidPartition:
    pass


@dataclass(frozen=True)
class SkewedPartition:
    high_pos_fraction_clients: float = 0.7
    pos_fraction_high: float = 0.9
    pos_fraction_low: float = 0.1

    def __post_init__(self):
        for v in (self.high_pos_fraction_clients, self.pos_fraction_high, self.pos_fraction_low):
            if not 0.0 <= v <= 1.0:
                raise DatasetError("partition proportions must be in [0, 1]")
        if self.pos_fraction_low > self.pos_fraction_high:
            raise DatasetError("pos_fraction_low must not exceed pos_fraction_high")


PartitionSpec = Union[IidPartition, SkewedPartition]


def partition_from_dict(d: Mapping[str, Any] | None) -> PartitionSpec:
    if not d or d.get("type", "iid") == "iid":
        return IidPartition()
    if d["type"] != "skewed":
        raise DatasetError(f"unknown partition type {d['type']!r}")
    extra = set(d) - {"type", "high_pos_fraction_clients", "pos_fraction_high", "pos_fraction_low"}
    if extra:
        raise DatasetError(f"partition: unknown field '{sorted(extra)[0]}'")
    return SkewedPartition(float(d.get("high_pos_fraction_clients", 0.7)),
                           float(d.get("pos_fraction_high", 0.9)),
                           float(d.get("pos_fraction_low", 0.1)))


def _clients(ds: Dataset, groups: list[np.ndarray]) -> list[ClientDataset]:
    out = []
    for cid, rows in enumerate(groups):
        rows = np.sort(rows)
        out.append(ClientDataset(cid, ds.dense(rows), np.asarray(ds.y[rows], dtype=float), rows))
    return out


def partition(ds: Dataset, n_clients: int, spec: PartitionSpec,
              rng: np.random.Generator) -> list[ClientDataset]:
    """Split every row of ``ds`` across ``n_clients`` (no duplication, no loss).

    ``skewed`` divides the rows into a positive-enriched pool with positive
    fraction ``pos_fraction_high`` and a negative-enriched remainder with
    ``pos_fraction_low``; the chosen share of clients deals the first pool,
    the rest deal the second. Pool sizes therefore follow from the data's
    base rate, which must lie between the two fractions.
    """
    if n_clients < 1:
        raise DatasetError("n_clients must be >= 1")
    n = len(ds)
    if n < n_clients:
        raise DatasetError(f"too few rows: {n} rows for {n_clients} clients")
    if isinstance(spec, IidPartition) or n_clients == 1:
        return _clients(ds, np.array_split(rng.permutation(n), n_clients))

    y = np.asarray(ds.y) > 0.5
    pos = rng.permutation(np.flatnonzero(y))
    neg = rng.permutation(np.flatnonzero(~y))
    n_high = int(np.floor(spec.high_pos_fraction_clients * n_clients + 0.5))
    order = rng.permutation(n_clients)
    high_ids, low_ids = order[:n_high], order[n_high:]
    ph, pl = spec.pos_fraction_high, spec.pos_fraction_low
    base = len(pos) / n
    if n_high == 0 or n_high == n_clients or ph == pl:
        pool_h = np.concatenate([pos, neg]) if n_high else np.empty(0, dtype=np.int64)
        pool_l = np.empty(0, dtype=np.int64) if n_high else np.concatenate([pos, neg])
    else:
        if not pl <= base <= ph:
            raise DatasetError(
                f"positive rate {base:.3f} outside [{pl}, {ph}]; skewed pools are infeasible")
        size_h = int(round((len(pos) - pl * n) / (ph - pl)))
        h_pos = min(len(pos), int(round(ph * size_h)))
        h_neg = min(len(neg), size_h - h_pos)
        pool_h = np.concatenate([pos[:h_pos], neg[:h_neg]])
        pool_l = np.concatenate([pos[h_pos:], neg[h_neg:]])
    groups: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * n_clients
    for ids, pool in ((high_ids, pool_h), (low_ids, pool_l)):
        if len(ids) == 0:
            continue
        for cid, rows in zip(sorted(ids), np.array_split(rng.permutation(pool), len(ids))):
            groups[cid] = rows
    if any(len(g) == 0 for g in groups):
        raise DatasetError("too few rows: a client received no data")
    return _clients(ds, groups)


# -- hashing, synthesis and ingestion --------------------------------------

def hash_bucket(column: str, value: str, d: int) -> int:
    digest = hashlib.blake2b(f"{column}={value}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % d


def _one_hot(cols: np.ndarray, d: int) -> sp.csr_matrix:
    n, f = cols.shape
    rows = np.repeat(np.arange(n), f)
    m = sp.coo_matrix((np.ones(n * f), (rows, cols.ravel())), shape=(n, d))
    return m.tocsr()  # duplicate buckets are summed


def generate_synthetic_ctr(n_rows: int, d: int = DEFAULT_DIM, rng: np.random.Generator | None = None,
                           *, n_fields: int = 8, cardinality: int = 64,
                           positive_rate: float = 0.25, weight_scale: float = 1.0) -> Dataset:
    """CTR-like rows from a known logistic model.

    Each of ``n_fields`` categorical fields takes a Zipf-weighted value out
    of ``cardinality``; values are hashed into ``d`` buckets. Labels are
    Bernoulli draws from ``sigmoid(x . w + b)`` with ``w ~ N(0, weight_scale)``
    and ``b`` set so the mean click probability is ``positive_rate``.
    """
    if n_rows < 1:
        raise DatasetError("n_rows must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    probs = 1.0 / np.arange(1, cardinality + 1) ** 1.1
    probs /= probs.sum()
    cols = np.empty((n_rows, n_fields), dtype=np.int64)
    for f in range(n_fields):
        table = np.array([hash_bucket(f"f{f}", str(v), d) for v in range(cardinality)])
        cols[:, f] = table[rng.choice(cardinality, size=n_rows, p=probs)]
    X = _one_hot(cols, d)
    w = rng.normal(0.0, weight_scale, d)
    z = X @ w
    lo, hi = -50.0, 50.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if expit(z + mid).mean() < positive_rate:
            lo = mid
        else:
            hi = mid
    b = 0.5 * (lo + hi)
    y = (rng.random(n_rows) < expit(z + b)).astype(float)
    return Dataset(X, y, None, ModelParams(w, b))


@dataclass(frozen=True)
class CsvSchema:
    label: str
    categorical: tuple[str, ...]
    device_id: str | None = None
    dim: int = DEFAULT_DIM

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CsvSchema":
        extra = set(d) - {"label_column", "categorical_columns", "device_id_column", "hash_dim"}
        if extra:
            raise DatasetError(f"schema: unknown field '{sorted(extra)[0]}'")
        try:
            return cls(d["label_column"], tuple(d["categorical_columns"]),
                       d.get("device_id_column"), int(d.get("hash_dim", DEFAULT_DIM)))
        except KeyError as exc:
            raise DatasetError(f"schema: missing required field {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "CsvSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def ingest_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read a CSV with a header row into hashed one-hot features.

    Rows are grouped by ``schema.device_id`` (first-appearance order of
    devices, original order within a device) when that column is declared.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        wanted = [schema.label, *schema.categorical] + ([schema.device_id] if schema.device_id else [])
        for col in wanted:
            if col not in header:
                raise DatasetError(f"{path}: unknown column '{col}'")
        li = header.index(schema.label)
        ci = [header.index(c) for c in schema.categorical]
        di = header.index(schema.device_id) if schema.device_id else None
        cols, labels, devs = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: malformed row at line {lineno}")
            lab = row[li].strip()
            if lab not in ("0", "1"):
                raise DatasetError(f"{path}: label must be 0 or 1 at line {lineno}")
            labels.append(float(lab))
            cols.append([hash_bucket(schema.categorical[j], row[c], schema.dim)
                         for j, c in enumerate(ci)])
            if di is not None:
                devs.append(row[di])
    if not labels:
        raise DatasetError(f"{path}: no data rows")
    X = _one_hot(np.asarray(cols, dtype=np.int64).reshape(len(labels), len(ci)), schema.dim)
    y = np.asarray(labels)
    if di is None:
        return Dataset(X, y)
    first: dict[str, int] = {}
    for dev in devs:
        first.setdefault(dev, len(first))
    keys = np.array([first[dev] for dev in devs])
    order = np.argsort(keys, kind="stable")
    return Dataset(X[order], y[order], np.asarray(devs, dtype=object)[order])


def save_dataset(ds: Dataset, path: str | Path) -> None:
    X = sp.csr_matrix(ds.X)
    extra = {}
    if ds.true_params is not None:
        extra = {"true_w": ds.true_params.weights, "true_b": np.array([ds.true_params.bias])}
    with open(path, "wb") as fh:
        np.savez(fh, data=X.data, indices=X.indices, indptr=X.indptr,
                 shape=np.array(X.shape), y=ds.y, **extra)


def load_dataset(path: str | Path) -> Dataset:
    with np.load(path) as z:
        X = sp.csr_matrix((z["data"], z["indices"], z["indptr"]), shape=tuple(z["shape"]))
        true = ModelParams(z["true_w"], float(z["true_b"][0])) if "true_w" in z else None
        return Dataset(X, z["y"].astype(float), None, true)


# -- dataset references -----------------------------------------------------
#
#   synthetic:rows=5000,dim=256[,fields=8][,seed=0][,rate=0.25]
#   path/to/file.npz            (written by ``gen-data``)
#   path/to/file.csv            (schema from params["schema"] or file.csv.schema.json)

_SYNTH_KEYS = {"rows": int, "dim": int, "fields": int, "seed": int, "rate": float}


def parse_synthetic_ref(ref: str) -> dict:
    body = ref[len("synthetic:"):]
    out: dict[str, Any] = {"dim": DEFAULT_DIM, "fields": 8, "seed": 0, "rate": 0.25}
    for part in filter(None, body.split(",")):
        key, sep, value = part.partition("=")
        if not sep or key not in _SYNTH_KEYS:
            raise DatasetError(f"bad synthetic reference component '{part}'")
        try:
            out[key] = _SYNTH_KEYS[key](value)
        except ValueError as exc:
            raise DatasetError(f"bad value in '{part}'") from exc
    if "rows" not in out or out["rows"] < 1 or out["dim"] < 1:
        raise DatasetError("synthetic reference needs rows >= 1 and dim >= 1")
    return out


def _resolve(ref: str, base_dir) -> Path:
    p = Path(ref)
    if not p.is_absolute() and base_dir is not None:
        p = Path(base_dir) / p
    return p


def _schema_path(path: Path, params: Mapping[str, Any] | None, base_dir) -> Path:
    if params and params.get("schema"):
        return _resolve(str(params["schema"]), base_dir)
    return path.with_name(path.name + ".schema.json")


def check_dataset_ref(ref: str, base_dir=None, params: Mapping[str, Any] | None = None) -> None:
    if ref.startswith("synthetic:"):
        parse_synthetic_ref(ref)
        return
    path = _resolve(ref, base_dir)
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    if path.suffix == ".csv":
        schema = _schema_path(path, params, base_dir)
        if not schema.is_file():
            raise DatasetError(f"missing schema {schema}")
    elif path.suffix != ".npz":
        raise DatasetError(f"unsupported dataset format '{path.suffix}'")


@functools.lru_cache(maxsize=8)
def _synthetic(ref: str) -> Dataset:
    from .engine import stream

    cfg = parse_synthetic_ref(ref)
    return generate_synthetic_ctr(cfg["rows"], cfg["dim"], stream(cfg["seed"], "synthetic"),
                                  n_fields=cfg["fields"], positive_rate=cfg["rate"])


def load_dataset_ref(ref: str, base_dir=None, params: Mapping[str, Any] | None = None) -> Dataset:
    check_dataset_ref(ref, base_dir, params)
    if ref.startswith("synthetic:"):
        return _synthetic(ref)
    path = _resolve(ref, base_dir)
    if path.suffix == ".npz":
        return load_dataset(path)
    return ingest_csv(path, CsvSchema.load(_schema_path(path, params, base_dir)))
