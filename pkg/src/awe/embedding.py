"""Bilinear embedding scorer f(x, y) = x^T U^T V y trained with WARP.

The same trainer fits the plain model and the affinity-weighted model; the
latter is obtained by passing a ``weighter`` that multiplies each label's
score by an affinity value.
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .data import Dataset, Example, SparseVector

MODEL_MAGIC = "awe-model v1"

#: weighter(example, label) -> multiplicative score weight
Weighter = Callable[[Example, int], float]


class ArtifactError(ValueError):
    """Malformed or inconsistent model/cache/manifest artifact."""


class FingerprintMismatchError(ArtifactError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    margin: float = 1.0
    epochs: int = 30
    max_negative_trials: Optional[int] = None  # None -> Dy - 1
    seed: int = 0
    init_scale: float = 1.0
    max_norm: float = 1.0

    def __post_init__(self):
        for name in ("learning_rate", "margin", "init_scale", "max_norm"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be a positive finite number")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.max_negative_trials is not None and self.max_negative_trials < 1:
            raise ValueError("max_negative_trials must be >= 1")

    def trials_for(self, y_dim: int) -> int:
        if self.max_negative_trials is None:
            return max(y_dim - 1, 1)
        return self.max_negative_trials


@dataclass
class EmbeddingModel:
    """Input embedding ``U`` (d x Dx) and label embedding ``V`` (d x Dy)."""

    U: np.ndarray
    V: np.ndarray
    max_norm: float = 1.0

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=np.float64)
        self.V = np.ascontiguousarray(self.V, dtype=np.float64)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[0] != self.V.shape[0]:
            raise ValueError("U and V must be 2-D with the same number of rows")
        if self.U.shape[0] < 1:
            raise ValueError("embedding dimension must be positive")

    @property
    def d(self) -> int:
        return self.U.shape[0]

    @property
    def x_dim(self) -> int:
        return self.U.shape[1]

    @property
    def y_dim(self) -> int:
        return self.V.shape[1]

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.U.copy(), self.V.copy(), self.max_norm)

    def fingerprint(self) -> str:
        return hashlib.sha256(dumps_model(self).encode("ascii")).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingModel):
            return NotImplemented
        return (self.max_norm == other.max_norm and np.array_equal(self.U, other.U)
                and np.array_equal(self.V, other.V))


def _check_x(model: EmbeddingModel, x: SparseVector) -> None:
    if x.nnz and x.indices[-1] >= model.x_dim:
        raise IndexError(f"feature index {int(x.indices[-1])} out of range for Dx={model.x_dim}")


def embed_x(model: EmbeddingModel, x: SparseVector) -> np.ndarray:
    """Return sum_i x_i U_i."""
    _check_x(model, x)
    if not x.nnz:
        return np.zeros(model.d)
    return model.U[:, x.indices] @ x.values


def embed_dataset(model: EmbeddingModel, dataset: Dataset) -> np.ndarray:
    """Embeddings of every example, shape (m, d), in dataset order."""
    out = np.empty((dataset.m, model.d))
    for r, ex in enumerate(dataset.examples):
        out[r] = embed_x(model, ex.features)
    return out


def score_linear(model: EmbeddingModel, x: SparseVector, label: int) -> float:
    if not 0 <= label < model.y_dim:
        raise IndexError(f"label {label} out of range for Dy={model.y_dim}")
    return float(embed_x(model, x) @ model.V[:, label])


def score_all(model: EmbeddingModel, x: SparseVector) -> np.ndarray:
    """Linear scores for every label."""
    return embed_x(model, x) @ model.V


def rank_labels(scores) -> list:
    """Label ids by descending score; ties go to the lower id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable").tolist()


def rank_weight(k: int) -> float:
    """Harmonic rank weight L(k) = sum_{j=1..k} 1/j."""
    if k < 1:
        raise ValueError("rank_weight requires k >= 1")
    return math.fsum(1.0 / j for j in range(1, k + 1))


def project_columns(mat: np.ndarray, cols, max_norm: float) -> None:
    """Scale the given columns in place onto the max-norm ball."""
    for c in cols:
        norm = math.sqrt(float(mat[:, c] @ mat[:, c]))
        if norm > max_norm:
            mat[:, c] *= max_norm / norm


def warp_gradients(model: EmbeddingModel, x: SparseVector, positive: int, negative: int,
                   g_pos: float = 1.0, g_neg: float = 1.0, weight: float = 1.0):
    """Gradient of ``weight * (g_neg f(x,neg) - g_pos f(x,pos))`` inside the hinge.

    Returns ``(dU, dV_pos, dV_neg)`` where ``dU`` has one column per nonzero
    feature of ``x`` (in ``x.indices`` order).
    """
    ux = embed_x(model, x)
    v_pos = model.V[:, positive]
    v_neg = model.V[:, negative]
    direction = g_neg * v_neg - g_pos * v_pos
    dU = weight * np.outer(direction, x.values)
    dV_pos = -weight * g_pos * ux
    dV_neg = weight * g_neg * ux
    return dU, dV_pos, dV_neg


@dataclass
class StepReport:
    draws: int = 0
    violated: bool = False
    rank_estimate: int = 0
    negative: Optional[int] = None


def _negatives_of(example: Example, y_dim: int) -> np.ndarray:
    if not example.labels:
        return np.arange(y_dim)
    mask = np.ones(y_dim, dtype=bool)
    mask[list(example.labels)] = False
    return np.flatnonzero(mask)


def warp_step(model: EmbeddingModel, example: Example, positive: int,
              weighter: Optional[Weighter], config: TrainConfig,
              rng: np.random.Generator, negatives: Optional[np.ndarray] = None) -> StepReport:
    """One WARP update in place on ``model``.

    Negatives are drawn uniformly with replacement from labels outside the
    example's label set until ``f(neg) + margin > f(pos)`` or the trial
    budget runs out. Scores include the weighter factor.
    """
    y_dim = model.y_dim
    if negatives is None:
        negatives = _negatives_of(example, y_dim)
    report = StepReport()
    if negatives.size == 0:
        return report
    x = example.features
    ux = embed_x(model, x)
    V = model.V
    g_pos = 1.0 if weighter is None else float(weighter(example, positive))
    f_pos = g_pos * float(ux @ V[:, positive])
    trials = config.trials_for(y_dim)
    n_neg = negatives.size
    g_neg = 1.0
    negative = -1
    for draw in range(1, trials + 1):
        candidate = int(negatives[rng.integers(n_neg)])
        g_cand = 1.0 if weighter is None else float(weighter(example, candidate))
        f_neg = g_cand * float(ux @ V[:, candidate])
        if f_neg + config.margin > f_pos:
            report.violated = True
            report.draws = draw
            negative = candidate
            g_neg = g_cand
            break
    else:
        report.draws = trials
        return report

    report.negative = negative
    report.rank_estimate = (y_dim - 1) // report.draws
    scale = config.learning_rate * rank_weight(max(report.rank_estimate, 1))
    dU, dV_pos, dV_neg = warp_gradients(model, x, positive, negative, g_pos, g_neg)
    if x.nnz:
        model.U[:, x.indices] -= scale * dU
    V[:, positive] -= scale * dV_pos
    V[:, negative] -= scale * dV_neg
    project_columns(model.U, x.indices.tolist(), model.max_norm)
    project_columns(V, (positive, negative), model.max_norm)
    return report


def init_model(d: int, x_dim: int, y_dim: int, config: TrainConfig,
               rng: np.random.Generator) -> EmbeddingModel:
    if d < 1:
        raise ValueError("embedding dimension must be positive")
    std = config.init_scale / math.sqrt(d)
    U = rng.normal(0.0, std, size=(d, x_dim))
    V = rng.normal(0.0, std, size=(d, y_dim))
    model = EmbeddingModel(U, V, config.max_norm)
    project_columns(model.U, range(x_dim), config.max_norm)
    project_columns(model.V, range(y_dim), config.max_norm)
    return model


def train_warp(train: Dataset, config: TrainConfig, d: int,
               weighter: Optional[Weighter] = None,
               init: Optional[EmbeddingModel] = None,
               callback: Optional[Callable[[int, EmbeddingModel], None]] = None
               ) -> EmbeddingModel:
    """Fit U, V by WARP SGD; deterministic given ``config.seed``.

    ``init`` warm-starts from a copy of an existing model (the initial
    random draw is still consumed so the sampling stream is unchanged).
    ``callback(epoch, model)`` runs after every epoch.
    """
    if train.m == 0:
        raise ValueError("cannot train on an empty dataset")
    for ex in train.examples:
        if not ex.labels:
            raise ValueError(f"training example {ex.id} has no labels")
    rng = np.random.default_rng(config.seed)
    model = init_model(d, train.x_dim, train.y_dim, config, rng)
    if init is not None:
        if init.U.shape != model.U.shape or init.V.shape != model.V.shape:
            raise ValueError("warm-start model shape does not match")
        model = EmbeddingModel(init.U.copy(), init.V.copy(), config.max_norm)
    positives = [np.array(sorted(ex.labels)) for ex in train.examples]
    negatives = [_negatives_of(ex, train.y_dim) for ex in train.examples]
    for epoch in range(config.epochs):
        for r in rng.permutation(train.m):
            ex = train.examples[r]
            pos = positives[r]
            label = int(pos[rng.integers(pos.size)])
            warp_step(model, ex, label, weighter, config, rng, negatives[r])
        if callback is not None:
            callback(epoch, model)
    return model


def surrogate_loss(model: EmbeddingModel, dataset: Dataset, margin: float = 1.0,
                   weighter: Optional[Weighter] = None) -> float:
    """Mean pairwise hinge over all (positive, negative) label pairs."""
    total = 0.0
    count = 0
    for ex in dataset.examples:
        if not ex.labels:
            continue
        scores = score_all(model, ex.features)
        if weighter is not None:
            scores = scores * np.array([weighter(ex, j) for j in range(model.y_dim)])
        pos = np.array(sorted(ex.labels))
        neg = _negatives_of(ex, model.y_dim)
        if neg.size == 0:
            continue
        hinge = np.maximum(0.0, margin + scores[neg][None, :] - scores[pos][:, None])
        total += float(hinge.mean())
        count += 1
    return total / count if count else 0.0


# -- model file -------------------------------------------------------------

def _row(values) -> str:
    return " ".join("%.17g" % v for v in values)


def dumps_model(model: EmbeddingModel) -> str:
    buf = io.StringIO()
    buf.write(MODEL_MAGIC + "\n")
    buf.write(f"d {model.d} dx {model.x_dim} dy {model.y_dim} C {'%.17g' % model.max_norm}\n")
    for col in model.U.T:
        buf.write(_row(col) + "\n")
    for col in model.V.T:
        buf.write(_row(col) + "\n")
    return buf.getvalue()


def loads_model(text: str) -> EmbeddingModel:
    lines = text.splitlines()
    if not lines or lines[0] != MODEL_MAGIC:
        raise ArtifactError("not an awe-model v1 file")
    head = lines[1].split() if len(lines) > 1 else []
    if len(head) != 8 or head[0::2] != ["d", "dx", "dy", "C"]:
        raise ArtifactError("malformed model header")
    try:
        d, dx, dy = int(head[1]), int(head[3]), int(head[5])
        C = float(head[7])
    except ValueError:
        raise ArtifactError("malformed model header") from None
    body = lines[2:]
    if len(body) != dx + dy:
        raise ArtifactError(f"expected {dx + dy} embedding rows, found {len(body)}")
    try:
        cols = np.array([[float(t) for t in line.split()] for line in body], dtype=np.float64)
    except ValueError:
        raise ArtifactError("malformed embedding row") from None
    if cols.shape != (dx + dy, d):
        raise ArtifactError("embedding rows must each hold d floats")
    if not np.all(np.isfinite(cols)):
        raise ArtifactError("non-finite embedding entry")
    return EmbeddingModel(cols[:dx].T.copy(), cols[dx:].T.copy(), C)


def save_model(model: EmbeddingModel, path) -> str:
    """Write the model file; returns its fingerprint."""
    text = dumps_model(model)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def load_model(path) -> EmbeddingModel:
    with open(path, "r", encoding="ascii") as fh:
        return loads_model(fh.read())


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
