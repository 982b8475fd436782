"""Iterative reweight-and-retrain procedure.

Round 0 trains a plain embedding model. Each later round r builds an
affinity cache over the training set from model r-1, then trains a new
model whose scores are multiplied by that affinity. Artifacts land in a
directory; the manifest is written last and marks a completed run.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .affinity import (
    AffinityCache,
    CacheWeighter,
    KernelConfig,
    build_affinity_cache,
    load_cache,
    save_cache,
)
from .data import Dataset, Example
from .embedding import (
    ArtifactError,
    EmbeddingModel,
    FingerprintMismatchError,
    TrainConfig,
    file_sha256,
    load_model,
    save_model,
    score_all,
    train_warp,
)

logger = logging.getLogger(__name__)

MANIFEST_MAGIC = "awe-manifest v1"
MANIFEST_NAME = "manifest.awe"


@dataclass
class PipelineConfig:
    """``train_configs`` is one TrainConfig per round, or a single one that is
    reused with its seed offset by the round number."""

    rounds: int = 2
    dim: int = 32
    train_configs: Union[TrainConfig, Sequence[TrainConfig]] = field(default_factory=TrainConfig)
    kernel_config: KernelConfig = field(default_factory=KernelConfig)
    warm_start: bool = False
    artifact_dir: Union[str, os.PathLike] = "artifacts"
    workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if not isinstance(self.train_configs, TrainConfig):
            self.train_configs = list(self.train_configs)
            if len(self.train_configs) != self.rounds:
                raise ValueError("need exactly one TrainConfig per round")

    def train_config(self, r: int) -> TrainConfig:
        if isinstance(self.train_configs, TrainConfig):
            base = self.train_configs
            return dataclasses.replace(base, seed=base.seed + r)
        return self.train_configs[r]

    def serialize(self) -> List[str]:
        items = [("rounds", self.rounds), ("dim", self.dim),
                 ("warm_start", int(self.warm_start))]
        for r in range(self.rounds):
            for f in dataclasses.fields(TrainConfig):
                items.append((f"round{r}.{f.name}", getattr(self.train_config(r), f.name)))
        for f in dataclasses.fields(KernelConfig):
            items.append((f"kernel.{f.name}", getattr(self.kernel_config, f.name)))
        return [f"{k}={_cfg_value(v)}" for k, v in items]


def _cfg_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "%.17g" % v
    return str(v)


@dataclass
class PipelineArtifacts:
    directory: Path
    models: List[Path] = field(default_factory=list)
    caches: List[Optional[Path]] = field(default_factory=list)  # caches[0] is None
    model_hashes: List[str] = field(default_factory=list)
    cache_hashes: List[Optional[str]] = field(default_factory=list)
    config_lines: List[str] = field(default_factory=list)

    @property
    def manifest_path(self) -> Path:
        return self.directory / MANIFEST_NAME

    def model(self, r: int) -> EmbeddingModel:
        path = self.models[r]
        if file_sha256(path) != self.model_hashes[r]:
            raise FingerprintMismatchError(f"model file {path} changed since the run")
        return load_model(path)

    def cache(self, r: int) -> AffinityCache:
        if r < 1:
            raise ValueError("caches exist only for rounds >= 1")
        path = self.caches[r]
        if file_sha256(path) != self.cache_hashes[r]:
            raise FingerprintMismatchError(f"cache file {path} changed since the run")
        cache = load_cache(path)
        if cache.fingerprint != self.model_hashes[r - 1]:
            raise FingerprintMismatchError(
                f"cache {r} does not match model {r - 1}")
        return cache


def write_manifest(artifacts: PipelineArtifacts) -> None:
    lines = [MANIFEST_MAGIC]
    for r, (path, digest) in enumerate(zip(artifacts.models, artifacts.model_hashes)):
        if r >= 1:
            cpath = artifacts.caches[r]
            lines.append(f"cache {r} {cpath.name} {artifacts.cache_hashes[r]}")
        lines.append(f"model {r} {path.name} {digest}")
    lines += [f"cfg {line}" for line in artifacts.config_lines]
    with open(artifacts.manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(directory) -> PipelineArtifacts:
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise ArtifactError(f"no manifest in {directory}: run incomplete or missing")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ArtifactError("not an awe-manifest v1 file")
    models, caches, cfg = {}, {}, []
    for line in lines[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "cfg":
            cfg.append(rest)
            continue
        parts = rest.split()
        if kind not in ("model", "cache") or len(parts) != 3:
            raise ArtifactError(f"malformed manifest line {line!r}")
        r = int(parts[0])
        (models if kind == "model" else caches)[r] = (directory / parts[1], parts[2])
    rounds = len(models)
    if sorted(models) != list(range(rounds)) or sorted(caches) != list(range(1, rounds)):
        raise ArtifactError("manifest rounds are inconsistent")
    art = PipelineArtifacts(directory, config_lines=cfg)
    for r in range(rounds):
        art.models.append(models[r][0])
        art.model_hashes.append(models[r][1])
        art.caches.append(caches[r][0] if r else None)
        art.cache_hashes.append(caches[r][1] if r else None)
    return art


def fit_rounds(train: Dataset, config: PipelineConfig, on_model=None, on_cache=None):
    """Run every round in memory; returns ``(models, caches)`` with ``caches[0] = None``.

    ``on_model(r, model)`` and ``on_cache(r, cache)`` fire as soon as each
    artifact exists.
    """
    model = train_warp(train, config.train_config(0), config.dim)
    models, caches = [model], [None]
    if on_model is not None:
        on_model(0, model)
    for r in range(1, config.rounds):
        cache = build_affinity_cache(model, train, train, config.kernel_config,
                                     workers=config.workers)
        caches.append(cache)
        if on_cache is not None:
            on_cache(r, cache)
        weighter = CacheWeighter(cache, train, model)
        init = model if config.warm_start else None
        model = train_warp(train, config.train_config(r), config.dim,
                           weighter=weighter, init=init)
        models.append(model)
        if on_model is not None:
            on_model(r, model)
    return models, caches


def run_pipeline(train: Dataset, config: PipelineConfig) -> PipelineArtifacts:
    """Run all rounds, writing each model and cache as soon as it exists."""
    directory = Path(config.artifact_dir)
    directory.mkdir(parents=True, exist_ok=True)
    art = PipelineArtifacts(directory, config_lines=config.serialize())
    if art.manifest_path.exists():
        art.manifest_path.unlink()

    def on_model(r, model):
        path = directory / f"model_{r}.awe"
        art.models.append(path)
        art.model_hashes.append(save_model(model, path))
        if r == 0:
            art.caches.append(None)
            art.cache_hashes.append(None)
        logger.info("round %d: model written to %s", r, path)

    def on_cache(r, cache):
        path = directory / f"cache_{r}.awe"
        save_cache(cache, path)
        art.caches.append(path)
        art.cache_hashes.append(file_sha256(path))

    fit_rounds(train, config, on_model, on_cache)
    write_manifest(art)
    return art


def weighter_for_queries(cache_model: EmbeddingModel, cache: AffinityCache, train: Dataset,
                       queries: Dataset, workers: int = 1) -> CacheWeighter:
    """Weighter for unseen queries using a stored cache's kernel settings."""
    cache.verify(cache_model)
    kernel = dataclasses.replace(cache.config, exclude_self=False)
    test_cache = build_affinity_cache(cache_model, train, queries, kernel, workers=workers)
    return CacheWeighter(test_cache, train, cache_model)


def make_test_weighter(artifacts: PipelineArtifacts, r: int, train: Dataset,
                       queries: Dataset, workers: int = 1) -> CacheWeighter:
    if r < 1:
        raise ValueError("test weighters exist only for rounds >= 1")
    return weighter_for_queries(artifacts.model(r - 1), artifacts.cache(r), train,
                              queries, workers)


class AffinityScorer:
    """Scores G(x, y) * x^T U^T V y for all labels of a query example."""

    def __init__(self, model: EmbeddingModel, weighter: CacheWeighter):
        self.model = model
        self.weighter = weighter

    def __call__(self, example: Example) -> np.ndarray:
        return self.weighter.vector(example.id) * score_all(self.model, example.features)


class LinearScorer:
    def __init__(self, model: EmbeddingModel):
        self.model = model

    def __call__(self, example: Example) -> np.ndarray:
        return score_all(self.model, example.features)
