"""scikit-learn estimators wrapping the embedding, affinity, and kNN models.

Inputs follow sklearn conventions: ``X`` is a dense array or sparse matrix
of shape (n_samples, n_features); ``y`` is either a 1-D array of class
labels or a 2-D binary indicator matrix (multi-label annotation).
``decision_function`` returns one score per class, and ``predict`` the
top-ranked class.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted, validate_data

from .affinity import KernelConfig
from .data import Dataset, dataset_from_arrays
from .embedding import TrainConfig, embed_dataset, train_warp
from .evaluation import KNNScorer, precision_at_k
from .pipeline import AffinityScorer, LinearScorer, PipelineConfig, fit_rounds, weighter_for_queries


def _encode_targets(estimator, y, n_samples):
    """Set ``classes_`` and return per-sample label-id sets."""
    if sp.issparse(y) or np.ndim(y) == 2:
        Y = sp.csr_matrix(y)
        if Y.shape[0] != n_samples:
            raise ValueError("X and y have inconsistent numbers of samples")
        estimator.classes_ = np.arange(Y.shape[1])
        estimator._multilabel = True
        return [frozenset(Y.indices[Y.indptr[r]:Y.indptr[r + 1]]
                          [Y.data[Y.indptr[r]:Y.indptr[r + 1]] != 0].tolist())
                for r in range(n_samples)]
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ValueError("y must be 1-D with one entry per sample, or a 2-D indicator")
    estimator.classes_, codes = np.unique(y, return_inverse=True)
    estimator._multilabel = False
    return [frozenset([int(c)]) for c in codes]


def _truth_sets(estimator, y):
    if estimator._multilabel:
        Y = sp.csr_matrix(y)
        return [set(Y.indices[Y.indptr[r]:Y.indptr[r + 1]].tolist()) for r in range(Y.shape[0])]
    index = {c: i for i, c in enumerate(estimator.classes_.tolist())}
    return [{index[v]} if v in index else set() for v in np.asarray(y).tolist()]


class _AnnotatorMixin(ClassifierMixin):
    def _dataset(self, X) -> Dataset:
        return dataset_from_arrays(X, None, x_dim=self.n_features_in_,
                                   y_dim=len(self.classes_))

    def _fit_dataset(self, X, y) -> Dataset:
        X = validate_data(self, X, accept_sparse="csr", dtype=np.float64)
        labels = _encode_targets(self, y, X.shape[0])
        if any(not s for s in labels):
            raise ValueError("every training sample needs at least one label")
        return dataset_from_arrays(X, labels, x_dim=X.shape[1], y_dim=len(self.classes_))

    def _check_X(self, X):
        check_is_fitted(self, "classes_")
        return validate_data(self, X, accept_sparse="csr", dtype=np.float64, reset=False)

    def decision_function(self, X) -> np.ndarray:
        dataset = self._dataset(self._check_X(X))
        scorer = self._scorer(dataset)
        return np.vstack([scorer(ex) for ex in dataset.examples]) if dataset.m else \
            np.zeros((0, len(self.classes_)))

    def predict_ranking(self, X, k: int = 1) -> np.ndarray:
        """Top-k class labels per sample, best first (ties to the lower class index)."""
        scores = self.decision_function(X)
        order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
        return self.classes_[order]

    def predict(self, X) -> np.ndarray:
        return self.predict_ranking(X, 1)[:, 0]

    def score(self, X, y, sample_weight=None, k: int = 1) -> float:
        """Mean Prec@k over samples with a non-empty truth set."""
        scores = self.decision_function(X)
        truth = _truth_sets(self, y)
        values = []
        for row, t in zip(scores, truth):
            if not t:
                continue
            ranked = np.argsort(-row, kind="stable").tolist()
            values.append(precision_at_k(ranked, t, k))
        if sample_weight is not None:
            raise NotImplementedError("sample_weight is not supported")
        return float(np.mean(values)) if values else 0.0


class WarpEmbedding(_AnnotatorMixin, TransformerMixin, BaseEstimator):
    """Bilinear embedding model trained with the WARP ranking loss.

    Parameters
    ----------
    dim : int
        Embedding dimension.
    learning_rate, margin, epochs, max_negative_trials, max_norm, init_scale :
        WARP hyperparameters; ``max_negative_trials=None`` means n_classes - 1.
    random_state : int
        Seed for initialization and sampling.

    Attributes
    ----------
    model_ : EmbeddingModel
    classes_ : ndarray
    """

    def __init__(self, dim=32, learning_rate=0.01, margin=1.0, epochs=30,
                 max_negative_trials=None, max_norm=1.0, init_scale=1.0, random_state=0):
        self.dim = dim
        self.learning_rate = learning_rate
        self.margin = margin
        self.epochs = epochs
        self.max_negative_trials = max_negative_trials
        self.max_norm = max_norm
        self.init_scale = init_scale
        self.random_state = random_state

    def _train_config(self, seed_offset=0) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, margin=self.margin,
                           epochs=self.epochs, max_negative_trials=self.max_negative_trials,
                           seed=int(self.random_state or 0) + seed_offset,
                           init_scale=self.init_scale, max_norm=self.max_norm)

    def fit(self, X, y):
        train = self._fit_dataset(X, y)
        self.model_ = train_warp(train, self._train_config(), self.dim)
        return self

    def _scorer(self, dataset):
        return LinearScorer(self.model_)

    def transform(self, X) -> np.ndarray:
        """Input embeddings Ux, shape (n_samples, dim)."""
        return embed_dataset(self.model_, self._dataset(self._check_X(X)))


class AffinityWeightedEmbedding(WarpEmbedding):
    """Embedding model whose label scores are reweighted by a neighbor affinity.

    Fitting trains a plain WARP model, builds top-``n_neighbors`` kernel
    affinities from its embedding, and retrains with scores multiplied by
    that affinity; ``rounds`` > 2 repeats the reweighting.
    """

    def __init__(self, dim=32, learning_rate=0.01, margin=1.0, epochs=30,
                 max_negative_trials=None, max_norm=1.0, init_scale=1.0, random_state=0,
                 n_neighbors=20, lambda_x=None, agg="sum", mode="embedded-x", bias=0.0,
                 exclude_self=True, rounds=2, warm_start=False, n_jobs=1):
        super().__init__(dim=dim, learning_rate=learning_rate, margin=margin, epochs=epochs,
                         max_negative_trials=max_negative_trials, max_norm=max_norm,
                         init_scale=init_scale, random_state=random_state)
        self.n_neighbors = n_neighbors
        self.lambda_x = lambda_x
        self.agg = agg
        self.mode = mode
        self.bias = bias
        self.exclude_self = exclude_self
        self.rounds = rounds
        self.warm_start = warm_start
        self.n_jobs = n_jobs

    def fit(self, X, y):
        if self.rounds < 2:
            raise ValueError("rounds must be >= 2 for an affinity-weighted model")
        train = self._fit_dataset(X, y)
        kernel = KernelConfig(lambda_x=self.lambda_x, mode=self.mode, agg=self.agg,
                              n=self.n_neighbors, bias=self.bias,
                              exclude_self=self.exclude_self)
        config = PipelineConfig(rounds=self.rounds, dim=self.dim,
                                train_configs=self._train_config(), kernel_config=kernel,
                                warm_start=self.warm_start, workers=self.n_jobs)
        self.models_, self.caches_ = fit_rounds(train, config)
        self.model_ = self.models_[-1]
        self.train_ = train
        return self

    def _scorer(self, dataset):
        weighter = weighter_for_queries(self.models_[-2], self.caches_[-1], self.train_,
                                        dataset, workers=self.n_jobs)
        return AffinityScorer(self.model_, weighter)


class KernelKNNAnnotator(_AnnotatorMixin, BaseEstimator):
    """Kernel-weighted k-nearest-neighbor label ranking.

    ``embedding=None`` measures distances on raw features; otherwise the
    given ``WarpEmbedding`` (cloned and fitted on the same data) supplies
    the space.
    """

    def __init__(self, n_neighbors=20, lambda_x=None, embedding=None):
        self.n_neighbors = n_neighbors
        self.lambda_x = lambda_x
        self.embedding = embedding

    def fit(self, X, y):
        train = self._fit_dataset(X, y)
        model = None
        if self.embedding is not None:
            self.embedding_ = clone(self.embedding).fit(X, y)
            model = self.embedding_.model_
        self.scorer_ = KNNScorer(train, model, self.n_neighbors, self.lambda_x)
        return self

    def _scorer(self, dataset):
        return self.scorer_
