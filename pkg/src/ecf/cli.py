"""Command-line entry point: ``ecf <command> [options]``.

Results go to stdout, progress and diagnostics to stderr.  Any failure
prints one line ``ecf: error: <Kind>: <message>`` to stderr and exits
nonzero.  ``ECF_THREADS`` sets how many forest members train in parallel.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import baselines, metrics
from .explain import UnknownEntityError, explain, recommend_topk, tag_discovery
from .config import ConfigError, RunConfig, load_config
from .data import TEST, TRAIN, VALID, DataError, InteractionDataset, ItemTagMatrix, load_prepared, prepare_dataset, save_prepared
from .ranking import evaluate_ranking
from .trainer import (
    EcfMember,
    Forest,
    MfForest,
    MfModel,
    ModelFormatError,
    TrainingError,
    as_forest,
    load_model,
    save_model,
    train_forest,
    train_mf,
    train_single,
)

log = logging.getLogger("ecf")

THREADS_ENV = "ECF_THREADS"
EXPECTED_ERRORS = (
    ConfigError,
    DataError,
    ModelFormatError,
    TrainingError,
    UnknownEntityError,
    FileNotFoundError,
    ValueError,
)


class CliError(Exception):
    """Invalid combination of arguments or inputs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        sys.stderr.write(f"ecf: error: UsageError: {message}\n")
        raise SystemExit(2)


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


# -- shared plumbing ------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.data is not None:
        cfg.data.prepared_dir = args.data
    return cfg


def _dataset(cfg: RunConfig) -> tuple[InteractionDataset, ItemTagMatrix]:
    return load_prepared(cfg.require("data", "prepared_dir"))


def _model_shape(model) -> tuple[int, int]:
    if isinstance(model, (EcfMember, Forest)):
        aff = as_forest(model).members[0].affiliations
        return aff.num_users, aff.num_items
    if isinstance(model, MfForest):
        model = model.members[0]
    return model.user_emb.shape[0], model.item_emb.shape[0]


def _load_checked(path, ds: InteractionDataset, with_embeddings: bool = False):
    model = load_model(path, with_embeddings=with_embeddings)
    users, items = _model_shape(model)
    if (users, items) != (ds.num_users, ds.num_items):
        raise CliError(
            f"model has {users} users/{items} items but dataset has {ds.num_users}/{ds.num_items}; refusing to run"
        )
    return model


def _ecf(model) -> Forest:
    if not isinstance(model, (EcfMember, Forest)):
        raise CliError(f"command needs an ECF model, got {type(model).__name__}")
    return as_forest(model)


def _user(ds: InteractionDataset, user_id: str) -> int:
    try:
        return ds.user_ids.index(user_id)
    except ValueError:
        raise UnknownEntityError(f"unknown user id {user_id!r}") from None


def _item(ds: InteractionDataset, item_id: str) -> int:
    try:
        return ds.item_ids.index(item_id)
    except ValueError:
        raise UnknownEntityError(f"unknown item id {item_id!r}") from None


def _out(line: str = "") -> None:
    sys.stdout.write(line + "\n")


# -- commands -------------------------------------------------------------------------

def cmd_prepare(args, cfg: RunConfig) -> None:
    inter = args.interactions or cfg.require("data", "interactions")
    tags_path = args.item_tags or cfg.require("data", "item_tags")
    out = args.out or cfg.require("data", "prepared_dir")
    kcore = cfg.data.kcore if args.kcore is None else args.kcore
    min_tag = cfg.data.min_tag_items if args.min_tag_items is None else args.min_tag_items
    ds, tags = prepare_dataset(inter, tags_path, kcore, min_tag, cfg.data.ratios(), cfg.train.seed)
    save_prepared(ds, tags, out)
    counts = np.bincount(ds.split, minlength=3)
    _out(f"users\t{ds.num_users}")
    _out(f"items\t{ds.num_items}")
    _out(f"interactions\t{ds.num_interactions}")
    _out(f"tags\t{tags.num_tags}")
    _out(f"train\t{counts[TRAIN]}")
    _out(f"valid\t{counts[VALID]}")
    _out(f"test\t{counts[TEST]}")


def cmd_train(args, cfg: RunConfig) -> None:
    ds, tags = _dataset(cfg)
    tc = cfg.train
    if args.dim is not None:
        tc.dim = args.dim
    if args.epochs is not None:
        tc.epochs_max = args.epochs
        tc.patience = min(tc.patience, tc.epochs_max)
    F = args.forest_size or cfg.forest_size
    if args.kind == "single":
        model = train_single(ds, tags, tc)
    elif args.kind == "forest":
        model = train_forest(ds, tags, tc, F, n_jobs=_threads())
    else:
        model = train_mf(ds, tc)
    save_model(model, args.out)
    result = evaluate_ranking(model.scores, ds, VALID, (tc.eval_k,))
    _out(f"kind\t{args.kind}")
    _out(f"valid_recall@{tc.eval_k}\t{result[f'recall@{tc.eval_k}']:.4f}")
    _out(f"valid_ndcg@{tc.eval_k}\t{result[f'ndcg@{tc.eval_k}']:.4f}")


def cmd_evaluate(args, cfg: RunConfig) -> None:
    ds, _ = _dataset(cfg)
    model = _load_checked(args.model, ds, with_embeddings=False)
    which = TEST if args.split == "test" else VALID
    result = evaluate_ranking(model.scores, ds, which, args.k)
    for k in sorted(set(args.k)):
        _out(f"recall@{k}\t{result[f'recall@{k}']:.4f}")
    for k in sorted(set(args.k)):
        _out(f"ndcg@{k}\t{result[f'ndcg@{k}']:.4f}")


def cmd_explain(args, cfg: RunConfig) -> None:
    ds, _ = _dataset(cfg)
    forest = _ecf(_load_checked(args.model, ds))
    expl = explain(forest, _user(ds, args.user), _item(ds, args.item))
    if args.json:
        record = expl.to_record()
        record["user"], record["item"] = args.user, args.item
        _out(json.dumps(record, sort_keys=True))
        return
    _out(f"score\t{expl.score:.4f}")
    _out(expl.text)


def cmd_recommend(args, cfg: RunConfig) -> None:
    ds, _ = _dataset(cfg)
    forest = _ecf(_load_checked(args.model, ds))
    exclude = None if args.include_train else ds.matrix(TRAIN)
    for rank, (item, score) in enumerate(recommend_topk(forest, _user(ds, args.user), args.k, exclude), 1):
        _out(f"{rank}\t{ds.item_ids[item]}\t{score:.4f}")


def cmd_clusters(args, cfg: RunConfig) -> None:
    ds, _ = _dataset(cfg)
    forest = _ecf(_load_checked(args.model, ds))
    if not 0 <= args.member < len(forest.members):
        raise CliError(f"member {args.member} out of range (forest has {len(forest.members)})")
    sys.stdout.write(baselines.format_clusters(forest.members[args.member].clusters, ds))


def cmd_discover_tags(args, cfg: RunConfig) -> None:
    ds, tags = _dataset(cfg)
    forest = _ecf(_load_checked(args.model, ds))
    i = _item(ds, args.item)
    for name, score in tag_discovery(forest, i, args.top, tags.item_tags(i)):
        _out(f"{name}\t{score:.4f}")


def explainability_table(
    clusters,
    tags: ItemTagMatrix,
    mf_item_emb: np.ndarray,
    seed: int,
    size_threshold: int = 10,
    random_size: int = 0,
    discriminator_lr: float = 3e-3,
) -> dict[str, metrics.ExplainabilityReport]:
    """Score learned clusters against the three baselines.

    The same MF item embeddings serve as the silhouette space and the
    K-means input for every method.
    """
    Z = len(clusters)
    P = max((len(c.tags) for c in clusters), default=4)
    cfg = baselines.ClusterBuildConfig(Z, size_threshold, seed, P)
    size = random_size or clusters.mean_size() or size_threshold
    sets = {
        "ECF": clusters,
        "TagCluster": baselines.tag_cluster(tags, cfg),
        "K-means": baselines.kmeans_cluster(mf_item_emb, tags, cfg),
        "Random": baselines.random_cluster(tags, cfg, size),
    }
    log.info("training tag discriminator")
    disc = metrics.train_discriminator(tags.entries, seed=seed, lr=discriminator_lr)
    reports = {
        name: metrics.explainability_report(cs, tags.entries, mf_item_emb, disc) for name, cs in sets.items()
    }
    base = reports["Random"]
    for rep in reports.values():
        rep.overall = metrics.overall(rep, base)
    return reports


def cmd_explainability(args, cfg: RunConfig) -> None:
    ds, tags = _dataset(cfg)
    forest = _ecf(_load_checked(args.model, ds))
    mf = _load_checked(args.mf, ds, with_embeddings=True)
    if isinstance(mf, MfForest):
        mf = mf.members[0]
    if not isinstance(mf, MfModel):
        raise CliError("--mf must name an MF model file")
    if not 0 <= args.member < len(forest.members):
        raise CliError(f"member {args.member} out of range (forest has {len(forest.members)})")
    ec = cfg.explainability
    threshold = args.size_threshold or ec.size_threshold
    reports = explainability_table(
        forest.members[args.member].clusters, tags, mf.item_emb, cfg.train.seed, threshold, ec.random_size, ec.discriminator_lr
    )
    _out(metrics.format_report_table(reports))


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecf", description="Explainable collaborative filtering with taste clusters.")
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="seed for every random choice (overrides [train] seed)")
    p.add_argument("--data", help="prepared dataset directory (overrides [data] prepared_dir)")
    p.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="ingest, k-core filter and split a dataset")
    s.add_argument("--interactions")
    s.add_argument("--item-tags")
    s.add_argument("--out", help="output directory")
    s.add_argument("--kcore", type=int)
    s.add_argument("--min-tag-items", type=int)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a single model, a forest or BPR-MF")
    s.add_argument("--kind", choices=("single", "mf", "forest"), default="forest")
    s.add_argument("--out", required=True, help="model file to write")
    s.add_argument("--forest-size", type=int)
    s.add_argument("--dim", type=int, choices=(64, 180), help="embedding size")
    s.add_argument("--epochs", type=int, help="override epochs_max")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="Recall@K and NDCG@K")
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int, nargs="+", default=[5, 10, 20])
    s.add_argument("--split", choices=("test", "valid"), default="test")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("explain", help="explanation paths for one user-item pair")
    s.add_argument("user")
    s.add_argument("item")
    s.add_argument("--model", required=True)
    s.add_argument("--json", action="store_true", help="one JSON record instead of text")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("recommend", help="top-K items for a user")
    s.add_argument("user")
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--include-train", action="store_true")
    s.set_defaults(func=cmd_recommend)

    s = sub.add_parser("clusters", help="dump one member's taste clusters")
    s.add_argument("--model", required=True)
    s.add_argument("--member", type=int, default=0)
    s.set_defaults(func=cmd_clusters)

    s = sub.add_parser("explainability", help="explainability report against the baselines")
    s.add_argument("--model", required=True)
    s.add_argument("--mf", required=True, help="MF model supplying item embeddings")
    s.add_argument("--member", type=int, default=0)
    s.add_argument("--size-threshold", type=int)
    s.set_defaults(func=cmd_explainability)

    s = sub.add_parser("discover-tags", help="candidate tags for an item")
    s.add_argument("item")
    s.add_argument("--model", required=True)
    s.add_argument("--top", type=int, default=5)
    s.set_defaults(func=cmd_discover_tags)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args, _config(args))
    except (CliError, *EXPECTED_ERRORS) as exc:
        message = str(exc).replace("\n", " ")
        sys.stderr.write(f"ecf: error: {type(exc).__name__}: {message}\n")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
