import dataclasses
import os

import pytest

from awe.affinity import (
    KernelConfig,
    affinity_G,
    knn_embed,
    load_cache,
)
from awe.data import Dataset, Example, SparseVector, split_dataset
from awe.embedding import (
    ArtifactError,
    FingerprintMismatchError,
    TrainConfig,
    dumps_model,
    file_sha256,
    load_model,
    train_warp,
)
from awe.pipeline import (
    AffinityScorer,
    PipelineConfig,
    fit_rounds,
    make_test_weighter,
    read_manifest,
    run_pipeline,
    write_manifest,
)
from awe.synthetic import make_clustered_dataset


TINY = TrainConfig(epochs=3, seed=7)


@pytest.fixture(scope="module")
def small():
    return make_clustered_dataset(150, n_labels=6, x_dim=20, active=8, seed=3)


def _snapshot(directory):
    return {name: open(os.path.join(directory, name), "rb").read()
            for name in sorted(os.listdir(directory))}


class TestRunPipeline:
    def test_single_round_is_plain_training(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=1, dim=4, train_configs=TINY,
                                                 artifact_dir=tmp_path))
        assert len(art.models) == 1 and art.caches == [None]
        direct = dumps_model(train_warp(small, TINY, 4))
        assert open(art.models[0]).read() == direct

    def test_two_round_structure(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=2, dim=4, train_configs=TINY,
                                                 kernel_config=KernelConfig(n=5),
                                                 artifact_dir=tmp_path))
        assert [p.name for p in art.models] == ["model_0.awe", "model_1.awe"]
        assert art.caches[1].name == "cache_1.awe"
        assert load_cache(art.caches[1]).fingerprint == file_sha256(art.models[0])
        manifest = open(art.manifest_path).read().splitlines()
        assert manifest[0] == "awe-manifest v1"
        assert manifest[1].startswith("model 0 model_0.awe ")
        assert manifest[2].startswith("cache 1 cache_1.awe ")
        assert manifest[3].startswith("model 1 model_1.awe ")
        assert "cfg rounds=2" in manifest and "cfg kernel.n=5" in manifest
        back = read_manifest(tmp_path)
        assert back.model_hashes == art.model_hashes and back.cache_hashes == art.cache_hashes

    def test_three_rounds_chain(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=3, dim=4, train_configs=TINY,
                                                 kernel_config=KernelConfig(n=5),
                                                 artifact_dir=tmp_path))
        for r in (1, 2):
            assert art.cache(r).fingerprint == art.model_hashes[r - 1]

    def test_rerun_byte_identical(self, small, tmp_path):
        cfg = dict(rounds=2, dim=4, train_configs=TINY, kernel_config=KernelConfig(n=5))
        run_pipeline(small, PipelineConfig(artifact_dir=tmp_path / "a", **cfg))
        run_pipeline(small, PipelineConfig(artifact_dir=tmp_path / "b", **cfg))
        assert _snapshot(tmp_path / "a") == _snapshot(tmp_path / "b")

    def test_manifest_round_trip(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=2, dim=4, train_configs=TINY,
                                                 artifact_dir=tmp_path))
        text = open(art.manifest_path).read()
        write_manifest(read_manifest(tmp_path))
        assert open(art.manifest_path).read() == text

    def test_tampered_artifacts_rejected(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=2, dim=4, train_configs=TINY,
                                                 artifact_dir=tmp_path))
        with open(art.models[0], "a") as fh:
            fh.write("\n")
        with pytest.raises(FingerprintMismatchError):
            read_manifest(tmp_path).model(0)

    def test_swapped_cache_rejected(self, small, tmp_path):
        art = run_pipeline(small, PipelineConfig(rounds=3, dim=4, train_configs=TINY,
                                                 artifact_dir=tmp_path))
        # point the round-2 cache at the round-1 cache file (built from model 0)
        manifest = open(art.manifest_path).read()
        manifest = manifest.replace(f"cache 2 cache_2.awe {art.cache_hashes[2]}",
                                    f"cache 2 cache_1.awe {art.cache_hashes[1]}")
        open(art.manifest_path, "w").write(manifest)
        with pytest.raises(FingerprintMismatchError):
            read_manifest(tmp_path).cache(2)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ArtifactError, match="no manifest"):
            read_manifest(tmp_path)

    def test_failure_leaves_no_manifest(self, tmp_path):
        bad = Dataset((Example(0, SparseVector([0], [1.0]), frozenset()),), 1, 2)
        with pytest.raises(ValueError):
            run_pipeline(bad, PipelineConfig(rounds=2, artifact_dir=tmp_path))
        assert not (tmp_path / "manifest.awe").exists()

    def test_warm_start_differs(self, small, tmp_path):
        cold, _ = fit_rounds(small, PipelineConfig(rounds=2, dim=4, train_configs=TINY))
        warm, _ = fit_rounds(small, PipelineConfig(rounds=2, dim=4, train_configs=TINY,
                                                   warm_start=True))
        assert cold[0] == warm[0]
        assert cold[1] != warm[1]

    def test_config_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(rounds=0)
        with pytest.raises(ValueError):
            PipelineConfig(rounds=2, train_configs=[TINY])


class TestTestWeighter:
    @pytest.fixture
    def run(self, small, tmp_path):
        train, test = split_dataset(small, 0.2, seed=0)
        art = run_pipeline(train, PipelineConfig(
            rounds=2, dim=4, train_configs=TINY,
            kernel_config=KernelConfig(n=5, agg="max", bias=0.02), artifact_dir=tmp_path))
        return train, test, art

    def test_duplicate_of_training_point(self, run):
        train, _, art = run
        src = train.examples[3]
        query = Dataset((Example(10_000, src.features, frozenset()),), train.x_dim, train.y_dim)
        w = make_test_weighter(art, 1, train, query)
        label = min(src.labels)
        assert w(query.examples[0], label) == pytest.approx(1.0 + 0.02, abs=1e-15)

    def test_floor_and_manual_cache(self, run):
        train, test, art = run
        w = make_test_weighter(art, 1, train, test)
        model0 = load_model(art.models[0])
        cfg = dataclasses.replace(load_cache(art.caches[1]).config, exclude_self=False)
        index = train.by_id()
        for ex in test.examples[:10]:
            nl = knn_embed(model0, train, ex.features, cfg, query_id=ex.id)
            carried = set().union(*(index[i].labels for i in nl.ids.tolist()))
            for label in range(train.y_dim):
                assert w(ex, label) == affinity_G(nl, train, label, cfg)
                if label not in carried:
                    assert w(ex, label) == 0.02

    def test_rejects_round_zero_and_mismatch(self, run, tmp_path):
        train, test, art = run
        with pytest.raises(ValueError):
            make_test_weighter(art, 0, train, test)
        art.model_hashes[0] = "0" * 64
        with pytest.raises(FingerprintMismatchError):
            make_test_weighter(art, 1, train, test)

    def test_affinity_scorer(self, run):
        train, test, art = run
        w = make_test_weighter(art, 1, train, test)
        model1 = load_model(art.models[1])
        ex = test.examples[0]
        scores = AffinityScorer(model1, w)(ex)
        for y in range(train.y_dim):
            lin = float((model1.U[:, ex.features.indices] @ ex.features.values) @ model1.V[:, y])
            assert scores[y] == pytest.approx(w(ex, y) * lin, abs=1e-15)
