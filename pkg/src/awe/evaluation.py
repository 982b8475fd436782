"""Prec@k evaluation and kernel-vote nearest-neighbor baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .affinity import KernelConfig, affinity_vector, knn_embed, resolve_kernel, _points
from .data import Dataset, Example, SparseVector
from .embedding import EmbeddingModel, rank_labels

#: scorer(example) -> array of scores over all labels
Scorer = Callable[[Example], np.ndarray]


def precision_at_k(ranked: Sequence[int], truth, k: int) -> float:
    """|top-k of ranked ∩ truth| / k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds ranked list length {len(ranked)}")
    truth = set(truth)
    return sum(1 for lab in ranked[:k] if lab in truth) / k


@dataclass
class EvalReport:
    rows: List[tuple] = field(default_factory=list)
    evaluated: int = 0
    skipped: int = 0

    def add(self, name: str, precisions: Dict[int, float]) -> None:
        self.rows.append((name, dict(precisions)))

    def row(self, name: str) -> Dict[int, float]:
        for row_name, values in self.rows:
            if row_name == name:
                return values
        raise KeyError(name)

    def to_table(self) -> str:
        ks = sorted({k for _, vals in self.rows for k in vals})
        headers = ["Algorithm"] + [f"Prec@{k}" for k in ks]
        body = [[name] + [f"{100 * vals[k]:.1f}%" if k in vals else "-" for k in ks]
                for name, vals in self.rows]
        widths = [max(len(r[c]) for r in [headers] + body) for c in range(len(headers))]
        fmt = lambda r: "  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
        lines = [fmt(headers), "  ".join("-" * w for w in widths)] + [fmt(r) for r in body]
        lines.append(f"(evaluated {self.evaluated}, skipped {self.skipped})")
        return "\n".join(lines)

    def to_tsv(self) -> str:
        lines = []
        for name, vals in self.rows:
            cells = "\t".join(f"prec@{k}=%.17g" % vals[k] for k in sorted(vals))
            lines.append(f"{name}\t{cells}")
        return "\n".join(lines)


def evaluate(scorer: Scorer, test: Dataset, ks: Sequence[int] = (1, 3),
             name: str = "model", report: Optional[EvalReport] = None) -> EvalReport:
    """Mean Prec@k over test examples with a non-empty truth set.

    Per-example values are summed in ascending example-id order so the mean
    does not depend on how the test set is ordered.
    """
    if test.m == 0:
        raise ValueError("empty test set")
    ks = sorted(set(int(k) for k in ks))
    per_example = {}
    skipped = 0
    for ex in test.examples:
        if not ex.labels:
            skipped += 1
            continue
        ranked = rank_labels(scorer(ex))
        per_example[ex.id] = [precision_at_k(ranked, ex.labels, k) for k in ks]
    evaluated = len(per_example)
    order = sorted(per_example)
    means = {}
    for j, k in enumerate(ks):
        total = math.fsum(per_example[i][j] for i in order)
        means[k] = total / evaluated if evaluated else 0.0
    if report is None:
        report = EvalReport()
    report.add(name, means)
    report.evaluated, report.skipped = evaluated, skipped
    return report


class KNNScorer:
    """Kernel-weighted vote over the k nearest training examples.

    With ``model=None`` distances are measured on raw input features,
    otherwise in the model's input embedding space.
    """

    def __init__(self, train: Dataset, model: Optional[EmbeddingModel] = None,
                 k: int = 20, lambda_x: Optional[float] = None):
        if train.m == 0:
            raise ValueError("empty training set")
        if k < 1:
            raise ValueError("k must be >= 1")
        mode = "raw" if model is None else "embedded-x"
        self.config = resolve_kernel(model, train, KernelConfig(
            lambda_x=lambda_x, mode=mode, agg="sum", n=k, bias=0.0, exclude_self=False))
        self.train = train
        self.model = model
        self._points = _points(model, train, mode)
        self._index = train.by_id()

    def neighbors(self, x: SparseVector):
        return knn_embed(self.model, self.train, x, self.config,
                         train_points=self._points)

    def scores(self, x: SparseVector) -> np.ndarray:
        return affinity_vector(self.neighbors(x), self.train, self.config,
                               train_index=self._index)

    def __call__(self, example: Example) -> np.ndarray:
        return self.scores(example.features)


def knn_predict(train: Dataset, query: SparseVector, model: Optional[EmbeddingModel] = None,
                k: int = 20, lambda_x: Optional[float] = None) -> list:
    """Labels ranked by summed kernel weight over the k nearest neighbors."""
    return rank_labels(KNNScorer(train, model, k, lambda_x).scores(query))
