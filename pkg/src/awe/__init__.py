"""Affinity-weighted bilinear embeddings for multi-label annotation."""

from .affinity import AffinityCache, KernelConfig, affinity_G, build_affinity_cache, knn_embed
from .data import Dataset, Example, SparseVector, read_dataset, save_dataset, split_dataset
from .embedding import EmbeddingModel, TrainConfig, load_model, save_model, train_warp
from .estimators import AffinityWeightedEmbedding, KernelKNNAnnotator, WarpEmbedding
from .evaluation import evaluate, knn_predict, precision_at_k
from .pipeline import PipelineConfig, read_manifest, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AffinityCache", "AffinityWeightedEmbedding", "Dataset", "EmbeddingModel", "Example",
    "KernelConfig", "KernelKNNAnnotator", "PipelineConfig", "SparseVector", "TrainConfig",
    "WarpEmbedding", "affinity_G", "build_affinity_cache", "evaluate", "knn_embed",
    "knn_predict", "load_model", "precision_at_k", "read_dataset", "read_manifest",
    "run_pipeline", "save_dataset", "save_model", "split_dataset", "train_warp",
]
