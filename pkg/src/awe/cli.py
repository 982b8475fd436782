"""Command-line driver: ``awe <subcommand> [flags]``.

Exit codes: 0 success, 2 usage error, 3 artifact/validation error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .affinity import CacheWeighter, KernelConfig, build_affinity_cache, load_cache, save_cache
from .data import DatasetFormatError, read_dataset, save_dataset, split_dataset
from .embedding import (
    ArtifactError,
    FingerprintMismatchError,
    TrainConfig,
    file_sha256,
    load_model,
    rank_labels,
    save_model,
    surrogate_loss,
    train_warp,
)
from .evaluation import EvalReport, KNNScorer, evaluate
from .pipeline import (
    AffinityScorer,
    LinearScorer,
    PipelineConfig,
    run_pipeline,
    weighter_for_queries,
)
from .synthetic import make_clustered_dataset


EXIT_USAGE = 2
EXIT_ARTIFACT = 3
EXIT_IO = 4

ALGOS = ("linear", "affinity", "knn-raw", "knn-embed")


class UsageError(Exception):
    pass


def _int_list(text: str):
    try:
        values = [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _algo_list(text: str):
    algos = [t for t in text.split(",") if t]
    bad = [a for a in algos if a not in ALGOS]
    if bad or not algos:
        raise argparse.ArgumentTypeError(f"unknown algorithm(s) {bad}; choose from {ALGOS}")
    return algos


def _bool01(text: str) -> bool:
    if text.lower() in ("1", "true", "yes"):
        return True
    if text.lower() in ("0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected 0 or 1, got {text!r}")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--dim", type=int, default=32, help="embedding dimension d")
    g.add_argument("--lr", type=float, default=0.01, help="learning rate")
    g.add_argument("--margin", type=float, default=1.0)
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--max-neg", type=int, default=None,
                   help="negative sampling trials per step (default Dy-1)")
    g.add_argument("--max-norm", type=float, default=1.0, help="column max-norm C")
    g.add_argument("--init-scale", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)


def _add_kernel_flags(p, neighbors_only=False):
    g = p.add_argument_group("affinity")
    g.add_argument("--lambda-x", type=float, default=None,
                   help="kernel width (default: median heuristic)")
    g.add_argument("--n", type=int, default=20, help="neighbors kept per query")
    g.add_argument("--workers", type=int, default=1)
    if neighbors_only:
        return
    g.add_argument("--lambda-y", type=float, default=None,
                   help="label kernel width for --mode embedded-xy")
    g.add_argument("--agg", choices=("sum", "max"), default="sum")
    g.add_argument("--mode", choices=("embedded-x", "embedded-xy", "raw"), default="embedded-x")
    g.add_argument("--bias", type=float, default=0.0)
    g.add_argument("--exclude-self", type=_bool01, default=True, metavar="{0,1}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="awe", description="Affinity-weighted embedding models for label annotation.")
    parser.add_argument("--config", help="key=value file of flag defaults (flags override)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a base embedding model with WARP")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)

    p = sub.add_parser("affinity", help="build an affinity cache from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--queries", help="query dataset (default: the training set)")
    p.add_argument("--out", required=True)
    _add_kernel_flags(p)

    p = sub.add_parser("retrain", help="train an affinity-weighted model from a cache")
    p.add_argument("--cache", required=True)
    p.add_argument("--base", required=True, help="model the cache was built from")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--warm-start", action="store_true")
    _add_train_flags(p)

    for name, help_text in (("eval", "report Prec@k on a test set"),
                            ("predict", "print top-ranked labels per query")):
        p = sub.add_parser(name, help=help_text)
        if name == "eval":
            p.add_argument("--test", required=True)
            p.add_argument("--k", type=_int_list, default=[1, 3], help="e.g. 1,3")
            p.add_argument("--format", choices=("table", "tsv"), default="table")
            p.add_argument("--algo", type=_algo_list, default=["linear"],
                           help="comma list of " + ",".join(ALGOS))
        else:
            p.add_argument("--queries", required=True)
            p.add_argument("--top", type=int, default=1)
            p.add_argument("--algo", choices=ALGOS, default="linear")
        p.add_argument("--model", help="scoring model (linear/affinity/knn-embed)")
        p.add_argument("--train", help="training set (affinity and kNN algorithms)")
        p.add_argument("--cache-model", help="model the affinity cache was built from")
        p.add_argument("--cache-config-from", help="affinity cache supplying kernel settings")
        _add_kernel_flags(p, neighbors_only=True)

    p = sub.add_parser("pipeline", help="run train -> affinity -> retrain for several rounds")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--rounds", type=int, default=2)
    p.add_argument("--warm-start", action="store_true")
    _add_train_flags(p)
    _add_kernel_flags(p)

    p = sub.add_parser("split", help="seeded train/test split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)

    p = sub.add_parser("synth", help="write a synthetic clustered dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--examples", type=int, default=2500)
    p.add_argument("--labels", type=int, default=20)
    p.add_argument("--x-dim", type=int, default=100)
    p.add_argument("--active", type=int, default=20, help="nonzero features per example")
    p.add_argument("--clusters-per-label", type=int, default=2)
    p.add_argument("--label-noise", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _read_config(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _apply_config(parser, argv, values):
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sub in subparsers.choices.values():
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            action = known.get(key)
            if action is None:
                continue
            if isinstance(action, argparse._StoreTrueAction):
                defaults[key] = _bool01(value)
            elif action.type is not None:
                defaults[key] = action.type(value)
            else:
                defaults[key] = value
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _validate(args):
    positive_int = ("dim", "epochs", "n", "workers", "rounds", "top", "max_neg", "examples",
                    "labels", "x_dim", "active", "clusters_per_label")
    positive_float = ("lr", "margin", "max_norm", "init_scale", "lambda_x", "lambda_y")
    for name in positive_int:
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
    for name in positive_float:
        value = getattr(args, name, None)
        if value is not None and not value > 0:
            raise UsageError(f"--{name.replace('_', '-')} must be > 0")
    if getattr(args, "bias", 0.0) < 0:
        raise UsageError("--bias must be >= 0")
    if args.command == "split" and not 0 < args.test_fraction < 1:
        raise UsageError("--test-fraction must lie in (0, 1)")
    if args.command == "synth" and not 0 <= args.label_noise < 1:
        raise UsageError("--label-noise must lie in [0, 1)")


def _train_config(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, margin=args.margin, epochs=args.epochs,
                       max_negative_trials=args.max_neg, seed=args.seed,
                       init_scale=args.init_scale, max_norm=args.max_norm)


def _kernel_config(args) -> KernelConfig:
    return KernelConfig(lambda_x=args.lambda_x, mode=args.mode, agg=args.agg, n=args.n,
                        bias=args.bias, exclude_self=args.exclude_self,
                        lambda_y=args.lambda_y)


def _check_dims(model, dataset, what):
    if model.x_dim != dataset.x_dim or model.y_dim != dataset.y_dim:
        raise ArtifactError(
            f"{what} dims ({dataset.x_dim}, {dataset.y_dim}) do not match model "
            f"({model.x_dim}, {model.y_dim})")


def cmd_train(args, out):
    train = read_dataset(args.data)
    cfg = _train_config(args)
    model = train_warp(train, cfg, args.dim)
    save_model(model, args.out)
    print(f"train_loss={'%.17g' % surrogate_loss(model, train, cfg.margin)}", file=out)


def cmd_affinity(args, out):
    model = load_model(args.model)
    train = read_dataset(args.train, dims=(model.x_dim, model.y_dim))
    queries = train if args.queries is None else read_dataset(
        args.queries, dims=(model.x_dim, model.y_dim), labels_optional=True)
    cache = build_affinity_cache(model, train, queries, _kernel_config(args),
                                 workers=args.workers)
    save_cache(cache, args.out)
    print(f"queries={len(cache.lists)} lambda_x={'%.17g' % cache.config.lambda_x}", file=out)


def cmd_retrain(args, out):
    base = load_model(args.base)
    cache = load_cache(args.cache)
    if cache.fingerprint != file_sha256(args.base):
        raise FingerprintMismatchError("cache was not built from the given base model")
    train = read_dataset(args.data, dims=(base.x_dim, base.y_dim))
    missing = [ex.id for ex in train if ex.id not in cache.lists]
    if missing:
        raise ArtifactError(f"cache has no neighbor list for training example {missing[0]}")
    cfg = _train_config(args)
    weighter = CacheWeighter(cache, train, base)
    model = train_warp(train, cfg, args.dim, weighter=weighter,
                       init=base if args.warm_start else None)
    save_model(model, args.out)
    print(f"train_loss={'%.17g' % surrogate_loss(model, train, cfg.margin, weighter)}",
          file=out)


def _scorer(algo, args, queries):
    """Build a scorer for ``algo``; returns (scorer, label_dim)."""
    model = load_model(args.model) if args.model else None
    train = None
    if algo != "linear":
        if not args.train:
            raise UsageError(f"--algo {algo} needs --train")
        dims = (model.x_dim, model.y_dim) if model is not None else None
        train = read_dataset(args.train, dims=dims)
    if algo == "linear":
        if model is None:
            raise UsageError("--algo linear needs --model")
        return LinearScorer(model)
    if algo == "knn-raw":
        return KNNScorer(train, None, args.n, args.lambda_x)
    if algo == "knn-embed":
        if model is None:
            raise UsageError("--algo knn-embed needs --model")
        return KNNScorer(train, model, args.n, args.lambda_x)
    if model is None or not args.cache_model or not args.cache_config_from:
        raise UsageError("--algo affinity needs --model, --cache-model, --cache-config-from")
    cache_model = load_model(args.cache_model)
    cache = load_cache(args.cache_config_from)
    if cache.fingerprint != file_sha256(args.cache_model):
        raise FingerprintMismatchError("cache was not built from --cache-model")
    _check_dims(cache_model, train, "training set")
    weighter = weighter_for_queries(cache_model, cache, train, queries, workers=args.workers)
    return AffinityScorer(model, weighter)


def _query_dims(args):
    for path in (args.model, args.cache_model):
        if path:
            m = load_model(path)
            return (m.x_dim, m.y_dim)
    if args.train:
        t = read_dataset(args.train)
        return (t.x_dim, t.y_dim)
    return None


def cmd_eval(args, out):
    test = read_dataset(args.test, dims=_query_dims(args), labels_optional=True)
    report = EvalReport()
    for algo in args.algo:
        evaluate(_scorer(algo, args, test), test, args.k, name=algo, report=report)
    print(report.to_table() if args.format == "table" else report.to_tsv(), file=out)


def cmd_predict(args, out):
    queries = read_dataset(args.queries, dims=_query_dims(args), labels_optional=True)
    scorer = _scorer(args.algo, args, queries)
    for ex in queries:
        scores = scorer(ex)
        if args.top > scores.size:
            raise UsageError(f"--top {args.top} exceeds the {scores.size} labels")
        top = rank_labels(scores)[: args.top]
        cells = "\t".join(f"{lab}:{'%.17g' % scores[lab]}" for lab in top)
        print(f"{ex.id}\t{cells}", file=out)


def cmd_pipeline(args, out):
    train = read_dataset(args.data)
    cfg = PipelineConfig(rounds=args.rounds, dim=args.dim, train_configs=_train_config(args),
                         kernel_config=_kernel_config(args), warm_start=args.warm_start,
                         artifact_dir=args.out_dir, workers=args.workers)
    art = run_pipeline(train, cfg)
    for r, path in enumerate(art.models):
        print(f"model {r} {path}", file=out)
    print(f"manifest {art.manifest_path}", file=out)


def cmd_split(args, out):
    data = read_dataset(args.data)
    train, test = split_dataset(data, args.test_fraction, args.seed)
    save_dataset(train, args.train_out)
    save_dataset(test, args.test_out)
    print(f"train={train.m} test={test.m}", file=out)


def cmd_synth(args, out):
    ds = make_clustered_dataset(args.examples, n_labels=args.labels, x_dim=args.x_dim,
                                clusters_per_label=args.clusters_per_label,
                                active=min(args.active, args.x_dim),
                                label_noise=args.label_noise, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"examples={ds.m}", file=out)


COMMANDS = {
    "train": cmd_train,
    "affinity": cmd_affinity,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "pipeline": cmd_pipeline,
    "split": cmd_split,
    "synth": cmd_synth,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        cfg_path = None
        if "--config" in argv:
            i = argv.index("--config")
            if i + 1 < len(argv):
                cfg_path = argv[i + 1]
        if cfg_path is not None:
            args = _apply_config(parser, argv, _read_config(cfg_path))
        else:
            args = parser.parse_args(argv)
        _validate(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except argparse.ArgumentTypeError as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_IO

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, ArtifactError, ValueError, KeyError, IndexError) as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except OSError as exc:
        print(f"awe: error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
