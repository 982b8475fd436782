"""Sparse examples, datasets, and the line-oriented dataset text format.

One example per line::

    <label[,label...]> <idx>:<val> [<idx>:<val> ...]

An optional first line ``#dims <Dx> <Dy>`` declares the dimensions; other
lines starting with ``#`` are comments, except the ``#id <k>`` directive,
which sets the id of the next example (ids otherwise count up from 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np
import scipy.sparse as sp


class DatasetFormatError(ValueError):
    """Raised for malformed dataset text or invariant violations."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message} at line {line}"
        super().__init__(message)


def _fmt(value: float) -> str:
    return "%.17g" % value


class SparseVector:
    """Sorted (index, value) pairs with finite, nonzero values."""

    __slots__ = ("indices", "values")

    def __init__(self, indices: Sequence[int] = (), values: Sequence[float] = ()):
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        val = np.asarray(values, dtype=np.float64).reshape(-1)
        if idx.shape != val.shape:
            raise ValueError("indices and values must have the same length")
        if idx.size:
            if idx[0] < 0:
                raise ValueError("negative feature index")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("feature indices must be strictly increasing")
            if not np.all(np.isfinite(val)):
                raise ValueError("non-finite feature value")
            if np.any(val == 0.0):
                raise ValueError("zero-valued feature")
        idx.setflags(write=False)
        val.setflags(write=False)
        self.indices = idx
        self.values = val

    @classmethod
    def from_dense(cls, dense: Sequence[float]) -> "SparseVector":
        arr = np.asarray(dense, dtype=np.float64)
        nz = np.flatnonzero(arr)
        return cls(nz, arr[nz])

    def to_dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim, dtype=np.float64)
        out[self.indices] = self.values
        return out

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def __len__(self) -> int:
        return self.nnz

    def __iter__(self):
        return iter(zip(self.indices.tolist(), self.values.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVector):
            return NotImplemented
        return np.array_equal(self.indices, other.indices) and np.array_equal(
            self.values, other.values
        )

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def __repr__(self) -> str:
        body = ", ".join(f"{i}:{v!r}" for i, v in self)
        return f"SparseVector({{{body}}})"


@dataclass(frozen=True)
class Example:
    id: int
    features: SparseVector
    labels: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("example id must be nonnegative")
        object.__setattr__(self, "labels", frozenset(int(l) for l in self.labels))


@dataclass(frozen=True)
class Dataset:
    """Immutable list of examples with declared feature and label dims."""

    examples: tuple
    x_dim: int
    y_dim: int

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if self.x_dim < 1 or self.y_dim < 1:
            raise ValueError("x_dim and y_dim must be positive")
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise ValueError(f"duplicate example id {ex.id}")
            seen.add(ex.id)
            if ex.features.nnz and ex.features.indices[-1] >= self.x_dim:
                raise ValueError(f"feature index >= x_dim in example {ex.id}")
            if ex.labels and max(ex.labels) >= self.y_dim:
                raise ValueError(f"label id >= y_dim in example {ex.id}")

    @property
    def m(self) -> int:
        return len(self.examples)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def ids(self) -> np.ndarray:
        return np.array([ex.id for ex in self.examples], dtype=np.int64)

    def by_id(self) -> dict:
        return {ex.id: ex for ex in self.examples}

    def to_csr(self) -> sp.csr_matrix:
        """Feature matrix, one row per example, in example order."""
        indptr = [0]
        for ex in self.examples:
            indptr.append(indptr[-1] + ex.features.nnz)
        if self.examples:
            indices = np.concatenate([ex.features.indices for ex in self.examples])
            data = np.concatenate([ex.features.values for ex in self.examples])
        else:
            indices = np.zeros(0, dtype=np.int64)
            data = np.zeros(0, dtype=np.float64)
        return sp.csr_matrix(
            (data, indices, np.asarray(indptr)), shape=(self.m, self.x_dim)
        )

    def label_matrix(self) -> sp.csr_matrix:
        """Binary label indicator matrix of shape (m, y_dim)."""
        rows, cols = [], []
        for r, ex in enumerate(self.examples):
            for lab in sorted(ex.labels):
                rows.append(r)
                cols.append(lab)
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.m, self.y_dim))


def dataset_from_arrays(X, Y=None, x_dim: Optional[int] = None,
                        y_dim: Optional[int] = None, ids=None) -> Dataset:
    """Build a Dataset from a (sparse or dense) matrix and label indicators.

    ``Y`` may be a 2-D indicator matrix, a 1-D array of label ids, or a
    sequence of label collections.
    """
    X = sp.csr_matrix(X, dtype=np.float64)
    X.sum_duplicates()
    X.sort_indices()
    X.eliminate_zeros()
    m = X.shape[0]
    if Y is None:
        label_sets = [frozenset()] * m
        y_dim = y_dim or 1
    elif sp.issparse(Y) or (hasattr(Y, "ndim") and np.ndim(Y) == 2):
        Yc = sp.csr_matrix(Y)
        label_sets = [frozenset(Yc.indices[Yc.indptr[r]:Yc.indptr[r + 1]]
                                [Yc.data[Yc.indptr[r]:Yc.indptr[r + 1]] != 0].tolist())
                      for r in range(m)]
        y_dim = y_dim or Yc.shape[1]
    else:
        label_sets = []
        for y in Y:
            if isinstance(y, (set, frozenset, list, tuple, np.ndarray)):
                label_sets.append(frozenset(int(v) for v in y))
            else:
                label_sets.append(frozenset([int(y)]))
        if y_dim is None:
            y_dim = 1 + max((max(s) for s in label_sets if s), default=0)
    if len(label_sets) != m:
        raise ValueError("X and Y have inconsistent numbers of rows")
    if ids is None:
        ids = range(m)
    examples = []
    for r, ex_id in zip(range(m), ids):
        lo, hi = X.indptr[r], X.indptr[r + 1]
        examples.append(Example(int(ex_id), SparseVector(X.indices[lo:hi], X.data[lo:hi]),
                                label_sets[r]))
    return Dataset(tuple(examples), x_dim or max(X.shape[1], 1), y_dim)


def _parse_labels(field_text: str, lineno: int) -> frozenset:
    if field_text == "":
        return frozenset()
    labels = []
    for tok in field_text.split(","):
        if not tok.isdigit():
            raise DatasetFormatError(f"malformed label {tok!r}", lineno)
        labels.append(int(tok))
    if len(set(labels)) != len(labels):
        raise DatasetFormatError("duplicate label", lineno)
    return frozenset(labels)


def _parse_features(tokens: Iterable[str], lineno: int) -> SparseVector:
    indices, values = [], []
    prev = -1
    for tok in tokens:
        idx_text, sep, val_text = tok.partition(":")
        if not sep or not idx_text.isdigit():
            raise DatasetFormatError(f"malformed feature {tok!r}", lineno)
        idx = int(idx_text)
        try:
            val = float(val_text)
        except ValueError:
            raise DatasetFormatError(f"malformed feature value {val_text!r}", lineno) from None
        if idx == prev:
            raise DatasetFormatError("duplicate feature index", lineno)
        if idx < prev:
            raise DatasetFormatError("unsorted feature index", lineno)
        if not math.isfinite(val):
            raise DatasetFormatError("non-finite feature value", lineno)
        if val == 0.0:
            raise DatasetFormatError("zero-valued feature", lineno)
        indices.append(idx)
        values.append(val)
        prev = idx
    return SparseVector(indices, values)


def parse_dataset(stream, dims: Optional[tuple] = None,
                  labels_optional: bool = False) -> Dataset:
    """Parse the dataset text format.

    Parameters
    ----------
    stream : str or iterable of lines
        Whole text or a line iterator (e.g. an open file).
    dims : (int, int), optional
        Declared ``(x_dim, y_dim)``. Must agree with a ``#dims`` header if
        both are present. Without either, dims are inferred as max index + 1.
    labels_optional : bool
        Accept examples with an empty label field.
    """
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = stream
    header_dims = None
    examples = []
    next_id = 0
    pending_id = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if line == "":
            continue
        if line.startswith("#"):
            parts = line.split()
            if lineno == 1 and parts[0] == "#dims":
                if len(parts) != 3 or not (parts[1].isdigit() and parts[2].isdigit()):
                    raise DatasetFormatError("malformed #dims header", lineno)
                header_dims = (int(parts[1]), int(parts[2]))
                if min(header_dims) < 1:
                    raise DatasetFormatError("dims must be positive", lineno)
            elif parts[0] == "#id":
                if len(parts) != 2 or not parts[1].isdigit():
                    raise DatasetFormatError("malformed #id directive", lineno)
                pending_id = int(parts[1])
            continue
        label_text, _, rest = line.partition(" ")
        labels = _parse_labels(label_text, lineno)
        if not labels and not labels_optional:
            raise DatasetFormatError("empty label set", lineno)
        features = _parse_features(rest.split(), lineno)
        ex_id = pending_id if pending_id is not None else next_id
        pending_id = None
        next_id = ex_id + 1
        examples.append((lineno, Example(ex_id, features, labels)))

    if dims is not None and header_dims is not None and tuple(dims) != header_dims:
        raise DatasetFormatError(
            f"declared dims {tuple(dims)} disagree with header {header_dims}")
    declared = header_dims if header_dims is not None else (
        tuple(dims) if dims is not None else None)

    if declared is not None:
        x_dim, y_dim = declared
        for lineno, ex in examples:
            if ex.features.nnz and ex.features.indices[-1] >= x_dim:
                raise DatasetFormatError("feature index >= declared dim", lineno)
            if ex.labels and max(ex.labels) >= y_dim:
                raise DatasetFormatError("label id >= declared dim", lineno)
    else:
        x_dim = 1 + max((int(ex.features.indices[-1]) for _, ex in examples
                         if ex.features.nnz), default=0)
        y_dim = 1 + max((max(ex.labels) for _, ex in examples if ex.labels), default=0)

    seen = set()
    for lineno, ex in examples:
        if ex.id in seen:
            raise DatasetFormatError(f"duplicate example id {ex.id}", lineno)
        seen.add(ex.id)
    return Dataset(tuple(ex for _, ex in examples), x_dim, y_dim)


def write_dataset(dataset: Dataset, out: Optional[TextIO] = None) -> str:
    """Serialize to canonical text (floats at 17 significant digits)."""
    parts = [f"#dims {dataset.x_dim} {dataset.y_dim}\n"]
    next_id = 0
    for ex in dataset.examples:
        if ex.id != next_id:
            parts.append(f"#id {ex.id}\n")
        next_id = ex.id + 1
        line = ",".join(str(l) for l in sorted(ex.labels))
        line += "".join(f" {i}:{_fmt(v)}" for i, v in ex.features)
        parts.append((line or " ") + "\n")
    text = "".join(parts)
    if out is not None:
        out.write(text)
    return text


def read_dataset(path, dims=None, labels_optional: bool = False) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_dataset(fh, dims=dims, labels_optional=labels_optional)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_dataset(dataset, fh)


def split_dataset(dataset: Dataset, test_fraction: float, seed: int = 0):
    """Seeded disjoint train/test partition that keeps original ids and order."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * dataset.m))
    perm = rng.permutation(dataset.m)
    is_test = np.zeros(dataset.m, dtype=bool)
    is_test[perm[:n_test]] = True
    train = [ex for ex, t in zip(dataset.examples, is_test) if not t]
    test = [ex for ex, t in zip(dataset.examples, is_test) if t]
    return (Dataset(tuple(train), dataset.x_dim, dataset.y_dim),
            Dataset(tuple(test), dataset.x_dim, dataset.y_dim))
