import numpy as np
import pytest

from awe.data import Dataset, Example, SparseVector
from awe.embedding import EmbeddingModel


@pytest.fixture
def three_text():
    return "#dims 6 8\n3,7 0:1.0 5:0.25\n1 2:-0.5\n0,2,4 1:3 3:1e-3 4:2.5\n"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_dataset(rng, m, x_dim, y_dim, nnz=3, max_labels=2, ids=None):
    examples = []
    for r in range(m):
        idx = np.sort(rng.choice(x_dim, size=min(nnz, x_dim), replace=False))
        vals = rng.normal(size=idx.size)
        vals[vals == 0] = 0.5
        labs = rng.choice(y_dim, size=rng.integers(1, max_labels + 1), replace=False)
        ex_id = r if ids is None else ids[r]
        examples.append(Example(int(ex_id), SparseVector(idx, vals), frozenset(labs.tolist())))
    return Dataset(tuple(examples), x_dim, y_dim)


def random_model(rng, d, x_dim, y_dim, max_norm=1.0):
    return EmbeddingModel(rng.normal(size=(d, x_dim)) / np.sqrt(d),
                          rng.normal(size=(d, y_dim)) / np.sqrt(d), max_norm)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
