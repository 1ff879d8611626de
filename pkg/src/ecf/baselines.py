"""Reference clusterings scored alongside the learned taste clusters.

* :func:`tag_cluster` groups items sharing a tag set,
* :func:`kmeans_cluster` groups items by latent-factor similarity,
* :func:`random_cluster` draws clusters uniformly at random.

All three label each cluster with its most frequent member tags so the
explainability metrics treat them exactly like learned clusters.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataError, InteractionDataset, ItemTagMatrix
from .model import TasteCluster, TasteClusterSet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterBuildConfig:
    num_clusters: int = 64
    size_threshold: int = 10
    seed: int = 0
    tags_per_cluster: int = 4

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if self.size_threshold < 1:
            raise ValueError("size_threshold must be >= 1")
        if self.tags_per_cluster < 1:
            raise ValueError("tags_per_cluster must be >= 1")


def frequent_tags(members, entries: np.ndarray, P: int) -> tuple[tuple[int, ...], tuple[float, ...]]:
    """The ``P`` most frequent tags among ``members``; ties go to the lower tag index.

    Tags no member carries are never chosen, so fewer than ``P`` may return.
    Scores are the share of members carrying each tag.
    """
    members = np.asarray(members, dtype=np.int64)
    if members.size == 0:
        return (), ()
    counts = entries[members].sum(axis=0)
    order = np.lexsort((np.arange(counts.size), -counts))
    top = [t for t in order[:P] if counts[t] > 0]
    return tuple(int(t) for t in top), tuple(float(counts[t] / members.size) for t in top)


def _labelled(groups: list[np.ndarray], tags: ItemTagMatrix, P: int) -> TasteClusterSet:
    clusters = []
    for c, members in enumerate(groups):
        members = np.unique(members)
        top, share = frequent_tags(members, tags.entries, P)
        clusters.append(TasteCluster(c, tuple(members.tolist()), top, share))
    return TasteClusterSet(tuple(clusters), tags.tag_names, tags.num_items)


def undersized(clusters: TasteClusterSet, threshold: int) -> list[int]:
    return [c.cluster_id for c in clusters if c.size < threshold]


def tag_cluster(tags: ItemTagMatrix, cfg: ClusterBuildConfig) -> TasteClusterSet:
    """Clusters of items sharing a seed item's tags.

    Each cluster starts from a distinct random seed item and takes every item
    whose tag set equals the seed's.  While the cluster is below
    ``size_threshold`` one remaining tag is dropped at random and every item
    carrying all remaining tags joins.  The last tag is never dropped; a
    cluster still short on a single tag is kept as is and reported.
    """
    cfg.validate()
    N = tags.num_items
    if cfg.num_clusters > N:
        raise DataError(f"cannot seed {cfg.num_clusters} clusters from {N} items")
    rng = np.random.default_rng(cfg.seed)
    E = tags.entries > 0
    seeds = rng.choice(N, size=cfg.num_clusters, replace=False)
    groups = []
    for s in seeds:
        required = np.flatnonzero(E[s])
        members = np.flatnonzero((E == E[s]).all(axis=1))
        while members.size < cfg.size_threshold and required.size > 1:
            required = np.delete(required, rng.integers(required.size))
            members = np.flatnonzero(E[:, required].all(axis=1))
        groups.append(members)
    result = _labelled(groups, tags, cfg.tags_per_cluster)
    short = undersized(result, cfg.size_threshold)
    if short:
        log.warning("tag clustering: %d cluster(s) below size %d: %s", len(short), cfg.size_threshold, short)
    return result


# -- k-means --------------------------------------------------------------------------

def _kmeans_pp(X: np.ndarray, Z: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(len(X))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, Z):
        total = d2.sum()
        # all remaining points coincide with a centre: any choice is as good
        idx = rng.integers(len(X)) if total <= 0 else rng.choice(len(X), p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X**2).sum(axis=1)[:, None] - 2.0 * X @ C.T + (C**2).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def lloyd(X: np.ndarray, Z: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6):
    """Euclidean k-means with k-means++ seeding.

    Returns:
        ``(labels, centers, sse_history)``; the SSE is recorded after every
        assignment step.  An emptied cluster is re-seeded with the point
        farthest from its current centre.
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= Z <= len(X):
        raise ValueError(f"need 1 <= Z <= {len(X)}, got {Z}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, Z, rng)
    history = []
    labels = np.zeros(len(X), dtype=np.int64)
    for _ in range(max_iter):
        dist = _sq_dist(X, centers)
        labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(len(X)), labels].sum()))
        new = centers.copy()
        for c in range(Z):
            pts = labels == c
            if pts.any():
                new[c] = X[pts].mean(axis=0)
            else:
                far = int(dist[np.arange(len(X)), labels].argmax())
                new[c] = X[far]
                labels[far] = c
                dist[far] = 0.0
        shift = np.sqrt(((new - centers) ** 2).sum(axis=1)).max()
        centers = new
        if shift < tol:
            break
    dist = _sq_dist(X, centers)
    labels = dist.argmin(axis=1)
    history.append(float(dist[np.arange(len(X)), labels].sum()))
    return labels, centers, history


def kmeans_cluster(item_emb: np.ndarray, tags: ItemTagMatrix, cfg: ClusterBuildConfig) -> TasteClusterSet:
    """Partition items by k-means on their latent factors."""
    cfg.validate()
    labels, _, _ = lloyd(item_emb, cfg.num_clusters, cfg.seed)
    groups = [np.flatnonzero(labels == c) for c in range(cfg.num_clusters)]
    return _labelled(groups, tags, cfg.tags_per_cluster)


def random_cluster(tags: ItemTagMatrix, cfg: ClusterBuildConfig, size: int | float | None = None) -> TasteClusterSet:
    """Fixed-size random clusters drawn until every item is in one.

    At least ``num_clusters`` clusters are drawn.  ``size`` is normally the
    mean size of the learned clusters being compared; it defaults to
    ``size_threshold``.
    """
    cfg.validate()
    N = tags.num_items
    size = cfg.size_threshold if size is None else int(round(size))
    size = min(max(size, 1), N)
    rng = np.random.default_rng(cfg.seed)
    covered = np.zeros(N, dtype=bool)
    groups = []
    while len(groups) < cfg.num_clusters or not covered.all():
        members = rng.choice(N, size=size, replace=False)
        covered[members] = True
        groups.append(members)
    return _labelled(groups, tags, cfg.tags_per_cluster)


# -- text export ----------------------------------------------------------------------

def format_clusters(clusters: TasteClusterSet, ds: InteractionDataset | None = None) -> str:
    """One line per cluster: ``id<TAB>tag|tag|...<TAB>item item ...``.

    Items are written with their original IDs when ``ds`` is given, else as
    indices.
    """
    lines = ["# cluster_id\ttags\tmembers"]
    for c in clusters:
        names = "|".join(clusters.tag_names[t] for t in c.tags)
        items = " ".join(str(ds.item_ids[i]) if ds is not None else str(i) for i in c.members)
        lines.append(f"{c.cluster_id}\t{names}\t{items}")
    return "\n".join(lines) + "\n"


def write_clusters(clusters: TasteClusterSet, path, ds: InteractionDataset | None = None) -> None:
    Path(path).write_text(format_clusters(clusters, ds), encoding="utf-8")


def read_clusters(path, tags: ItemTagMatrix, ds: InteractionDataset | None = None) -> TasteClusterSet:
    """Parse :func:`write_clusters` output; unknown tags or items raise :class:`DataError`."""
    tag_col = {name: k for k, name in enumerate(tags.tag_names)}
    item_col = {str(iid): k for k, iid in enumerate(ds.item_ids)} if ds is not None else None
    clusters = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
        try:
            cid = int(fields[0])
            tag_idx = [tag_col[t] for t in fields[1].split("|") if t]
            if item_col is None:
                members = [int(x) for x in fields[2].split()]
            else:
                members = [item_col[x] for x in fields[2].split()]
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{lineno}: unknown or malformed entry {exc}") from None
        members = sorted(set(members))
        if any(not 0 <= i < tags.num_items for i in members):
            raise DataError(f"{path}:{lineno}: item index out of range")
        counts = tags.entries[members].sum(axis=0) if members else np.zeros(tags.num_tags)
        share = tuple(float(counts[t] / max(len(members), 1)) for t in tag_idx)
        clusters.append(TasteCluster(cid, tuple(members), tuple(tag_idx), share))
    return TasteClusterSet(tuple(clusters), tags.tag_names, tags.num_items)
