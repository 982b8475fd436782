"""Exit criteria for the package, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (section "acceptance criteria").
"""

import time

import numpy as np

from awe.affinity import (
    FeaturePairWeights,
    KernelConfig,
    affinity_G,
    build_affinity_cache,
    dumps_cache,
    knn_embed,
    load_cache,
    loads_cache,
    score_affinity,
    score_featurepair,
    score_lowrank,
)
from awe.cli import main as cli_main
from awe.data import SparseVector, parse_dataset, split_dataset, write_dataset, save_dataset
from awe.embedding import (
    FingerprintMismatchError,
    TrainConfig,
    dumps_model,
    loads_model,
    score_linear,
    train_warp,
)
from awe.evaluation import KNNScorer, evaluate, knn_predict
from awe.pipeline import (
    AffinityScorer,
    LinearScorer,
    PipelineConfig,
    make_test_weighter,
    read_manifest,
    run_pipeline,
    write_manifest,
)
from awe.synthetic import make_clustered_dataset

from conftest import ACCEPTANCE, random_dataset, random_model
from oracles import brute_G, brute_knn, brute_vote, double_sum
from test_embedding import gradient_check


def record(number, title, passed, detail=""):
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def test_criterion_1_ordering(tmp_path):
    """Affinity model >= linear in >= 3 of 5 seeds; linear >= raw kNN on the mean."""
    start = time.perf_counter()
    rows = []
    for seed in range(5):
        data = make_clustered_dataset(2500, n_labels=20, x_dim=100, label_noise=0.2, seed=seed)
        train, test = split_dataset(data, 0.2, seed=seed)
        assert train.m >= 2000 and test.m >= 500
        art = run_pipeline(train, PipelineConfig(
            rounds=2, dim=32, train_configs=TrainConfig(seed=seed),
            kernel_config=KernelConfig(n=20), artifact_dir=tmp_path / f"seed{seed}"))
        weighter = make_test_weighter(art, 1, train, test)
        linear = evaluate(LinearScorer(art.model(0)), test, [1]).row("model")[1]
        affinity = evaluate(AffinityScorer(art.model(1), weighter), test, [1]).row("model")[1]
        knn_raw = evaluate(KNNScorer(train, None, 20), test, [1]).row("model")[1]
        rows.append((affinity, linear, knn_raw))
    elapsed = time.perf_counter() - start
    rows = np.array(rows)
    wins = int(np.sum(rows[:, 0] >= rows[:, 1]))
    mean_aff, mean_lin, mean_knn = rows.mean(axis=0)
    ok = wins >= 3 and mean_lin >= mean_knn and elapsed < 600
    detail = (f"affinity>=linear in {wins}/5 seeds; mean Prec@1 affinity {mean_aff:.3f}, "
              f"linear {mean_lin:.3f}, knn-raw {mean_knn:.3f}; {elapsed:.0f}s")
    assert record(1, "Prec@1 ordering affinity >= linear >= raw kNN", ok, detail), detail


def test_criterion_2_knn_oracle():
    checked = 0
    ok = True
    for seed, m in enumerate([5, 40, 150, 500]):
        rng = np.random.default_rng(100 + seed)
        train = random_dataset(rng, m, 10, 6, nnz=4, max_labels=3)
        model = random_model(rng, 4, 10, 6)
        lam = float(rng.uniform(0.3, 2.0))
        queries = random_dataset(rng, 6, 10, 6).examples + train.examples[:4]
        for q in queries:
            for mdl, mode in ((model, "embedded-x"), (None, "raw")):
                for exclude in (False, True):
                    cfg = KernelConfig(lambda_x=lam, n=7, mode=mode, exclude_self=exclude)
                    qid = q.id if q in train.examples else None
                    got = knn_embed(mdl, train, q.features, cfg, query_id=qid)
                    exp = brute_knn(mdl, train, q.features, lam, 7,
                                    qid if exclude else None)
                    ok &= got.ids.tolist() == [i for i, _ in exp]
                    ok &= bool(np.all(np.abs(got.weights - [w for _, w in exp]) <= 1e-12))
                ok &= knn_predict(train, q.features, mdl, k=7, lambda_x=lam) == \
                    brute_vote(mdl, train, q.features, lam, 7)
                checked += 1
    assert record(2, "kNN matches brute-force oracle", ok, f"{checked} query/space pairs, m<=500")


def test_criterion_3_gradient_check():
    worst = gradient_check(np.random.default_rng(3), n_triplets=100, h=1e-5)
    assert record(3, "WARP gradient vs central differences", worst < 1e-4,
                  f"100 triplets, worst relative error {worst:.2e}")


def test_criterion_4_constant_g():
    rng = np.random.default_rng(4)
    train = random_dataset(rng, 60, 12, 7)
    cfg = TrainConfig(epochs=5, seed=21)
    base = dumps_model(train_warp(train, cfg, 6))
    reweighted = dumps_model(train_warp(train, cfg, 6, weighter=lambda ex, y: 1.0))
    model = random_model(rng, 5, 12, 7)
    worst = 0.0
    for ex in train.examples:
        for y in range(7):
            worst = max(worst, abs(score_affinity(model, 1.0, ex.features, y)
                                   - score_linear(model, ex.features, y)))
    ok = base == reweighted and worst <= 1e-12
    assert record(4, "constant-G reduction", ok, f"byte-identical={base == reweighted}, "
                                                  f"max score diff {worst:.1e}")


def test_criterion_5_g_algebra():
    rng = np.random.default_rng(5)
    train = random_dataset(rng, 300, 12, 10, max_labels=3)
    queries = random_dataset(rng, 100, 12, 10, ids=range(1000, 1100))
    model = random_model(rng, 5, 12, 10)
    n = 20
    base = dict(lambda_x=0.8, n=n, exclude_self=False)
    c_sum = build_affinity_cache(model, train, queries, KernelConfig(agg="sum", **base))
    c_max = build_affinity_cache(model, train, queries, KernelConfig(agg="max", **base))
    c_full = build_affinity_cache(model, train, queries,
                                  KernelConfig(agg="sum", **{**base, "n": train.m}))
    bias = 0.03
    c_bias = build_affinity_cache(model, train, queries, KernelConfig(agg="max", bias=bias, **base))
    index = train.by_id()
    ok = True
    pairs = [(int(q), int(y)) for q, y in zip(rng.choice(queries.ids, 1000),
                                             rng.integers(0, 10, 1000))]
    for q, y in pairs:
        g_sum = affinity_G(c_sum, train, y, query_id=q)
        g_max = affinity_G(c_max, train, y, query_id=q)
        g_full = affinity_G(c_full, train, y, query_id=q)
        g_bias = affinity_G(c_bias, train, y, query_id=q)
        carried = any(y in index[i].labels for i in c_bias[q].ids.tolist())
        ok &= g_bias >= bias and (g_bias == bias) == (not carried)
        ok &= g_max <= g_sum <= n * g_max
        ok &= g_sum <= g_full + 1e-15
        ok &= abs(g_sum - brute_G(list(c_sum[q]), train, y, "sum", 0.0)) <= 1e-12
    assert record(5, "G algebra (bias floor, max<=sum<=n*max, top-n<=full)", ok,
                  f"{len(pairs)} pairs")


def test_criterion_6_variants():
    rng = np.random.default_rng(6)
    ok = True
    worst_fp, worst_lr = 0.0, 0.0
    for _ in range(50):
        dx, dy = int(rng.integers(3, 10)), int(rng.integers(2, 8))
        model = random_model(rng, int(rng.integers(2, 6)), dx, dy)
        x = SparseVector.from_dense(rng.normal(size=dx) * (rng.random(dx) < 0.5))
        y_dense = rng.normal(size=dy) * (rng.random(dy) < 0.6)
        y = SparseVector.from_dense(y_dense)
        label = int(rng.integers(dy))
        ones = FeaturePairWeights.from_explicit(np.ones((dx, dy)))
        worst_fp = max(worst_fp, abs(score_featurepair(model, ones, x, label)
                                     - score_linear(model, x, label)))
        dg = int(rng.integers(1, 4))
        gx, gy = rng.normal(size=(dg, dx)), rng.normal(size=(dg, dy))
        G = (gx.T @ gy).tolist()
        low = score_lowrank(model, FeaturePairWeights.lowrank(gx, gy), x, y)
        explicit = score_featurepair(model, FeaturePairWeights.from_explicit(gx.T @ gy), x, y)
        oracle = double_sum(model.U.tolist(), model.V.tolist(), G, x, y)
        worst_lr = max(worst_lr, abs(low - explicit), abs(low - oracle), abs(explicit - oracle))
    ok = worst_fp <= 1e-12 and worst_lr <= 1e-10
    assert record(6, "feature-pair / low-rank equivalence", ok,
                  f"G=1 diff {worst_fp:.1e}, low-rank diff {worst_lr:.1e}")


def test_criterion_7_determinism_integrity(tmp_path):
    data = make_clustered_dataset(200, n_labels=6, x_dim=20, active=8, seed=7)
    cfg = dict(rounds=3, dim=6, train_configs=TrainConfig(epochs=3, seed=1),
               kernel_config=KernelConfig(n=5))
    runs = []
    for name in ("a", "b"):
        run_pipeline(data, PipelineConfig(artifact_dir=tmp_path / name, **cfg))
        runs.append({p.name: p.read_bytes() for p in sorted((tmp_path / name).iterdir())})
    reproducible = runs[0] == runs[1]

    art = read_manifest(tmp_path / "a")
    model0 = art.model(0)
    one = build_affinity_cache(model0, data, data, KernelConfig(n=5), workers=1)
    four = build_affinity_cache(model0, data, data, KernelConfig(n=5), workers=4)
    worker_invariant = dumps_cache(one) == dumps_cache(four)

    rejected = 0
    try:
        load_cache(art.caches[1], art.model(1))
    except FingerprintMismatchError:
        rejected += 1
    save_dataset(data, tmp_path / "d.txt")
    code = cli_main(["retrain", "--cache", str(art.caches[2]), "--base", str(art.models[0]),
                     "--data", str(tmp_path / "d.txt"), "--out", str(tmp_path / "x.awe")])
    rejected += code == 3
    manifest = (tmp_path / "a" / "manifest.awe").read_text()
    (tmp_path / "a" / "manifest.awe").write_text(
        manifest.replace(art.cache_hashes[2], art.cache_hashes[1]).replace(
            "cache_2.awe", "cache_1.awe"))
    try:
        read_manifest(tmp_path / "a").cache(2)
    except FingerprintMismatchError:
        rejected += 1
    ok = reproducible and worker_invariant and rejected == 3
    assert record(7, "determinism and integrity", ok,
                  f"rerun identical={reproducible}, workers 1 vs 4 identical={worker_invariant}, "
                  f"mismatches rejected {rejected}/3")


def test_criterion_8_round_trips(tmp_path):
    data = make_clustered_dataset(120, n_labels=5, x_dim=15, active=6, seed=8)
    train, test = split_dataset(data, 0.25, seed=2)
    results = {}
    for name, ds in (("dataset", data), ("split dataset", test)):
        text = write_dataset(ds)
        results[name] = write_dataset(parse_dataset(text)) == text and parse_dataset(text) == ds
    art = run_pipeline(train, PipelineConfig(rounds=2, dim=4, train_configs=TrainConfig(epochs=2),
                                             kernel_config=KernelConfig(n=4),
                                             artifact_dir=tmp_path))
    model_text = art.models[0].read_text()
    results["model"] = dumps_model(loads_model(model_text)) == model_text
    cache_text = art.caches[1].read_text()
    results["cache"] = dumps_cache(loads_cache(cache_text)) == cache_text
    manifest_text = art.manifest_path.read_text()
    write_manifest(read_manifest(tmp_path))
    results["manifest"] = art.manifest_path.read_text() == manifest_text
    ok = all(results.values())
    assert record(8, "format round-trips", ok,
                  ", ".join(f"{k}={'ok' if v else 'BROKEN'}" for k, v in results.items()))
