"""Affinity function G built from nearest neighbors in the embedding space.

For a query x and label y::

    G(x, y) = bias + AGG_{i in top-n(x), y in labels(x_i)} exp(-lambda_x ||Ux - Ux_i||^2)

with AGG either sum or max. The top-n neighbor lists are materialized once
per query in an :class:`AffinityCache` and reused for every label.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed

from .data import Dataset, Example, SparseVector
from .embedding import (
    ArtifactError,
    EmbeddingModel,
    FingerprintMismatchError,
    embed_dataset,
    embed_x,
    score_linear,
)

CACHE_MAGIC = "awe-cache v1"
MODES = ("embedded-x", "embedded-xy", "raw")
AGGS = ("sum", "max")


@dataclass(frozen=True)
class KernelConfig:
    """Kernel and sparsification settings.

    ``lambda_x=None`` means "resolve with the median heuristic" before use.
    ``lambda_y`` only matters in ``embedded-xy`` mode; ``None`` there keeps
    the exact-label indicator.
    """

    lambda_x: Optional[float] = None
    mode: str = "embedded-x"
    agg: str = "sum"
    n: int = 20
    bias: float = 0.0
    exclude_self: bool = True
    lambda_y: Optional[float] = None
    heuristic_pairs: int = 1000
    heuristic_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.agg not in AGGS:
            raise ValueError(f"agg must be one of {AGGS}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.lambda_x is not None and not (self.lambda_x > 0 and math.isfinite(self.lambda_x)):
            raise ValueError("lambda_x must be positive")
        if self.lambda_y is not None and not self.lambda_y > 0:
            raise ValueError("lambda_y must be positive")
        if not (self.bias >= 0 and math.isfinite(self.bias)):
            raise ValueError("bias must be nonnegative")


@dataclass
class NeighborList:
    query_id: int
    ids: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.size)

    def __iter__(self):
        return iter(zip(self.ids.tolist(), self.weights.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, NeighborList):
            return NotImplemented
        return (self.query_id == other.query_id and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.weights, other.weights))


def kernel_weight(u_q, u_i, lambda_x: float) -> float:
    """exp(-lambda_x ||u_q - u_i||^2)."""
    u_q = np.asarray(u_q, dtype=np.float64)
    u_i = np.asarray(u_i, dtype=np.float64)
    if u_q.shape != u_i.shape:
        raise ValueError("vectors must have equal length")
    if not lambda_x > 0:
        raise ValueError("lambda_x must be positive")
    diff = u_q - u_i
    return math.exp(-lambda_x * float(diff @ diff))


# -- representation of points for distance computations ---------------------

def _points(model: Optional[EmbeddingModel], dataset: Dataset, mode: str) -> np.ndarray:
    if mode == "raw" or model is None:
        return dataset.to_csr().toarray()
    return embed_dataset(model, dataset)


def _query_point(model: Optional[EmbeddingModel], x: SparseVector, x_dim: int,
                 mode: str) -> np.ndarray:
    if mode == "raw" or model is None:
        return x.to_dense(x_dim)
    return embed_x(model, x)


def median_heuristic(points: np.ndarray, pairs: int = 1000, seed: int = 0) -> float:
    """1 / median squared distance over seeded random pairs of distinct rows."""
    m = points.shape[0]
    if m < 2:
        return 1.0
    rng = np.random.default_rng(seed)
    a = rng.integers(m, size=pairs)
    b = (a + rng.integers(1, m, size=pairs)) % m
    diff = points[a] - points[b]
    med = float(np.median(np.einsum("ij,ij->i", diff, diff)))
    if not med > 0:
        return 1.0
    return 1.0 / med


def _label_points(model: EmbeddingModel) -> np.ndarray:
    return model.V.T


def resolve_kernel(model: Optional[EmbeddingModel], train: Dataset,
                   config: KernelConfig) -> KernelConfig:
    """Fill in data-dependent defaults (lambda_x and, for embedded-xy, lambda_y)."""
    if train.m == 0:
        raise ValueError("empty training set")
    updates = {}
    if config.lambda_x is None:
        pts = _points(model, train, config.mode)
        updates["lambda_x"] = median_heuristic(pts, config.heuristic_pairs,
                                               config.heuristic_seed)
    if config.mode == "embedded-xy" and config.lambda_y is None and model is not None:
        updates["lambda_y"] = median_heuristic(_label_points(model),
                                               config.heuristic_pairs, config.heuristic_seed)
    return replace(config, **updates) if updates else config


def _select(query_id: Optional[int], point: np.ndarray, train_points: np.ndarray,
            train_ids: np.ndarray, config: KernelConfig) -> NeighborList:
    diff = train_points - point
    d2 = np.einsum("ij,ij->i", diff, diff)
    weights = np.exp(-config.lambda_x * d2)
    ids = train_ids
    if config.exclude_self and query_id is not None:
        keep = ids != query_id
        weights = weights[keep]
        ids = ids[keep]
    order = np.lexsort((ids, -weights))[: config.n]
    return NeighborList(-1 if query_id is None else int(query_id),
                        ids[order].copy(), weights[order].copy())


def knn_embed(model: Optional[EmbeddingModel], train: Dataset, query: SparseVector,
              config: KernelConfig, query_id: Optional[int] = None,
              train_points: Optional[np.ndarray] = None) -> NeighborList:
    """Exact top-n training neighbors of one query by kernel weight.

    Ties in weight go to the lower training id. ``train_points`` may carry
    precomputed train representations (rows in dataset order).
    """
    if train.m == 0:
        raise ValueError("empty training set")
    if config.lambda_x is None:
        config = resolve_kernel(model, train, config)
    if train_points is None:
        train_points = _points(model, train, config.mode)
    point = _query_point(model, query, train.x_dim, config.mode)
    return _select(query_id, point, train_points, train.ids, config)


@dataclass
class AffinityCache:
    """Materialized, sparsified G: one neighbor list per query id."""

    config: KernelConfig
    fingerprint: str
    lists: Dict[int, NeighborList] = field(default_factory=dict)

    def verify(self, model: EmbeddingModel) -> None:
        if model.fingerprint() != self.fingerprint:
            raise FingerprintMismatchError(
                "affinity cache was built from a different model")

    def __getitem__(self, query_id: int) -> NeighborList:
        try:
            return self.lists[query_id]
        except KeyError:
            raise KeyError(f"unknown query id {query_id}") from None

    def __eq__(self, other) -> bool:
        if not isinstance(other, AffinityCache):
            return NotImplemented
        return dumps_cache(self) == dumps_cache(other)


def _chunk_lists(chunk, train_points, train_ids, config):
    return [_select(qid, pt, train_points, train_ids, config) for qid, pt in chunk]


def build_affinity_cache(model: EmbeddingModel, train: Dataset, queries: Dataset,
                         config: KernelConfig, workers: int = 1) -> AffinityCache:
    """Neighbor lists for every query, computed as a parallel map.

    Each query is processed independently, so the result does not depend on
    ``workers`` or on how queries are chunked.
    """
    if train.m == 0:
        raise ValueError("empty training set")
    if model.x_dim != train.x_dim or model.y_dim != train.y_dim:
        raise ValueError("model dimensions do not match the training set")
    if queries.x_dim != train.x_dim:
        raise ValueError("query feature dimension does not match the training set")
    config = resolve_kernel(model, train, config)
    train_points = _points(model, train, config.mode)
    query_points = _points(model, queries, config.mode)
    items = list(zip(queries.ids.tolist(), query_points))
    if workers <= 1 or len(items) < 2:
        lists = _chunk_lists(items, train_points, train.ids, config)
    else:
        n_chunks = min(len(items), 4 * workers)
        bounds = np.linspace(0, len(items), n_chunks + 1).astype(int)
        parts = Parallel(n_jobs=workers)(
            delayed(_chunk_lists)(items[lo:hi], train_points, train.ids, config)
            for lo, hi in zip(bounds[:-1], bounds[1:]))
        lists = [nl for part in parts for nl in part]
    return AffinityCache(config, model.fingerprint(), {nl.query_id: nl for nl in lists})


# -- evaluating G -------------------------------------------------------------

def affinity_vector(neighbors: NeighborList, train: Dataset, config: KernelConfig,
                    model: Optional[EmbeddingModel] = None,
                    train_index: Optional[dict] = None) -> np.ndarray:
    """G(x, y) for every label y of the training label space, bias included."""
    if train_index is None:
        train_index = train.by_id()
    out = np.zeros(train.y_dim)
    smooth_y = config.mode == "embedded-xy" and config.lambda_y is not None
    if smooth_y and model is None:
        raise ValueError("embedded-xy mode with lambda_y needs the model")
    for nid, w in neighbors:
        labels = sorted(train_index[nid].labels)
        if not labels:
            continue
        if smooth_y:
            # label kernel: closest of the neighbor's labels in V-space
            diff = model.V.T[:, None, :] - model.V.T[None, labels, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
            contrib = w * np.exp(-config.lambda_y * d2)
            if config.agg == "sum":
                out += contrib
            else:
                np.maximum(out, contrib, out=out)
        else:
            if config.agg == "sum":
                out[labels] += w
            else:
                out[labels] = np.maximum(out[labels], w)
    return out + config.bias


def affinity_G(source, train: Dataset, label: int, config: Optional[KernelConfig] = None,
               query_id: Optional[int] = None, model: Optional[EmbeddingModel] = None) -> float:
    """G(query, label) from a NeighborList, or from a cache plus ``query_id``."""
    if not 0 <= label < train.y_dim:
        raise IndexError(f"label {label} out of range")
    if isinstance(source, AffinityCache):
        config = config or source.config
        source = source[query_id]
    if config is None:
        raise ValueError("a KernelConfig is required with a bare NeighborList")
    return float(affinity_vector(source, train, config, model)[label])


class CacheWeighter:
    """Weighter closure ``(example, label) -> G`` backed by an affinity cache."""

    def __init__(self, cache: AffinityCache, train: Dataset,
                 model: Optional[EmbeddingModel] = None):
        self.cache = cache
        self.train = train
        self.model = model
        self._index = train.by_id()
        self._memo: Dict[int, np.ndarray] = {}

    def vector(self, query_id: int) -> np.ndarray:
        vec = self._memo.get(query_id)
        if vec is None:
            vec = affinity_vector(self.cache[query_id], self.train, self.cache.config,
                                  self.model, self._index)
            self._memo[query_id] = vec
        return vec

    def __call__(self, example: Example, label: int) -> float:
        return float(self.vector(example.id)[label])


def score_affinity(model2: EmbeddingModel, g_value: float, x: SparseVector, label: int) -> float:
    """G(x, y) * x^T U^T V y for the reweighted model."""
    if g_value < 0:
        raise ValueError("G must be nonnegative")
    return g_value * score_linear(model2, x, label)


# -- feature-pair variants ----------------------------------------------------

@dataclass
class FeaturePairWeights:
    """Feature-pair weights G_ij: explicit (Dx x Dy) or low-rank g_x^T g_y."""

    explicit: Optional[sp.csr_matrix] = None
    g_x: Optional[np.ndarray] = None
    g_y: Optional[np.ndarray] = None

    @classmethod
    def from_explicit(cls, matrix) -> "FeaturePairWeights":
        mat = sp.csr_matrix(matrix, dtype=np.float64)
        if not np.all(np.isfinite(mat.data)):
            raise ValueError("non-finite feature-pair weight")
        return cls(explicit=mat)

    @classmethod
    def lowrank(cls, g_x, g_y) -> "FeaturePairWeights":
        g_x = np.asarray(g_x, dtype=np.float64)
        g_y = np.asarray(g_y, dtype=np.float64)
        if g_x.ndim != 2 or g_y.ndim != 2 or g_x.shape[0] != g_y.shape[0]:
            raise ValueError("g_x and g_y must be 2-D with a shared rank")
        if not (np.all(np.isfinite(g_x)) and np.all(np.isfinite(g_y))):
            raise ValueError("non-finite low-rank factor")
        return cls(g_x=g_x, g_y=g_y)

    @property
    def is_lowrank(self) -> bool:
        return self.explicit is None

    @property
    def shape(self):
        if self.explicit is not None:
            return self.explicit.shape
        return (self.g_x.shape[1], self.g_y.shape[1])

    def materialize(self) -> sp.csr_matrix:
        if self.explicit is not None:
            return self.explicit
        return sp.csr_matrix(self.g_x.T @ self.g_y)


def _check_pair_dims(model: EmbeddingModel, weights: FeaturePairWeights,
                     x: SparseVector, y: SparseVector) -> None:
    if weights.shape != (model.x_dim, model.y_dim):
        raise ValueError("feature-pair weights do not match model dimensions")
    if x.nnz and x.indices[-1] >= model.x_dim:
        raise ValueError("x index out of range")
    if y.nnz and y.indices[-1] >= model.y_dim:
        raise ValueError("y index out of range")


def _as_label_vector(y) -> SparseVector:
    if isinstance(y, SparseVector):
        return y
    return SparseVector([int(y)], [1.0])


def score_featurepair(model: EmbeddingModel, weights: FeaturePairWeights,
                      x: SparseVector, y) -> float:
    """sum_ij G_ij x_i (U_i . V_j) y_j over the nonzeros of x and y."""
    y = _as_label_vector(y)
    _check_pair_dims(model, weights, x, y)
    if not (x.nnz and y.nnz):
        return 0.0
    G = weights.materialize()[x.indices][:, y.indices].toarray()
    UV = model.U[:, x.indices].T @ model.V[:, y.indices]
    return float(x.values @ (G * UV) @ y.values)


def score_lowrank(model: EmbeddingModel, weights: FeaturePairWeights,
                  x: SparseVector, y) -> float:
    """sum_ij (g_i . g_j) x_i (U_i . V_j) y_j without materializing G."""
    if not weights.is_lowrank:
        raise ValueError("score_lowrank needs low-rank weights")
    y = _as_label_vector(y)
    _check_pair_dims(model, weights, x, y)
    if not (x.nnz and y.nnz):
        return 0.0
    G = weights.g_x[:, x.indices].T @ weights.g_y[:, y.indices]
    UV = model.U[:, x.indices].T @ model.V[:, y.indices]
    return float(x.values @ (G * UV) @ y.values)


# -- cache file ---------------------------------------------------------------

def _f(v: float) -> str:
    return "%.17g" % v


def dumps_cache(cache: AffinityCache) -> str:
    cfg = cache.config
    if cfg.lambda_x is None:
        raise ArtifactError("cache config must have a resolved lambda_x")
    buf = io.StringIO()
    buf.write(CACHE_MAGIC + "\n")
    header = (f"model {cache.fingerprint} lambda_x {_f(cfg.lambda_x)} n {cfg.n} "
              f"agg {cfg.agg} mode {cfg.mode} bias {_f(cfg.bias)} "
              f"exclude_self {int(cfg.exclude_self)}")
    if cfg.mode == "embedded-xy" and cfg.lambda_y is not None:
        header += f" lambda_y {_f(cfg.lambda_y)}"
    buf.write(header + "\n")
    for qid, nl in cache.lists.items():
        pairs = "".join(f" {i}:{_f(w)}" for i, w in nl)
        buf.write(f"{qid} {len(nl)}{pairs}\n")
    return buf.getvalue()


def loads_cache(text: str) -> AffinityCache:
    lines = text.splitlines()
    if not lines or lines[0] != CACHE_MAGIC:
        raise ArtifactError("not an awe-cache v1 file")
    head = lines[1].split() if len(lines) > 1 else []
    keys = head[0::2]
    expected = ["model", "lambda_x", "n", "agg", "mode", "bias", "exclude_self"]
    if keys[:7] != expected or len(head) % 2 or keys[7:] not in ([], ["lambda_y"]):
        raise ArtifactError("malformed cache header")
    vals = dict(zip(keys, head[1::2]))
    try:
        config = KernelConfig(
            lambda_x=float(vals["lambda_x"]), n=int(vals["n"]), agg=vals["agg"],
            mode=vals["mode"], bias=float(vals["bias"]),
            exclude_self=bool(int(vals["exclude_self"])),
            lambda_y=float(vals["lambda_y"]) if "lambda_y" in vals else None)
    except ValueError as exc:
        raise ArtifactError(f"malformed cache header: {exc}") from None
    lists = {}
    for lineno, line in enumerate(lines[2:], start=3):
        toks = line.split()
        try:
            qid, k = int(toks[0]), int(toks[1])
            pairs = [t.split(":") for t in toks[2:]]
            ids = np.array([int(a) for a, _ in pairs], dtype=np.int64)
            weights = np.array([float(b) for _, b in pairs], dtype=np.float64)
        except (ValueError, IndexError):
            raise ArtifactError(f"malformed cache line {lineno}") from None
        if k != ids.size or k > config.n:
            raise ArtifactError(f"neighbor count mismatch at line {lineno}")
        if qid in lists:
            raise ArtifactError(f"duplicate query id at line {lineno}")
        lists[qid] = NeighborList(qid, ids, weights)
    return AffinityCache(config, vals["model"], lists)


def save_cache(cache: AffinityCache, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(dumps_cache(cache))


def load_cache(path, model: Optional[EmbeddingModel] = None) -> AffinityCache:
    """Read a cache file; if ``model`` is given its fingerprint must match."""
    with open(path, "r", encoding="ascii") as fh:
        cache = loads_cache(fh.read())
    if model is not None:
        cache.verify(model)
    return cache
