"""Recommendations and their explanation paths from a trained forest.

Every score is a sum of per-cluster contributions ``a_uc * x_ic`` over the
clusters a user and an item share, so an explanation is just that sum
spelled out term by term.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .model import TasteCluster
from .trainer import Forest, as_forest

log = logging.getLogger(__name__)

NO_PATH_TEXT = "No shared taste clusters support this recommendation."


class UnknownEntityError(LookupError):
    """A user or item index outside the trained model."""


@dataclass(frozen=True)
class ExplanationPath:
    member: int
    cluster_id: int
    tags: tuple[str, ...]
    weight: float


@dataclass
class Explanation:
    user: int
    item: int
    paths: list[ExplanationPath] = field(default_factory=list)
    score: float = 0.0
    text: str = ""

    def to_record(self) -> dict:
        return {
            "user": self.user,
            "item": self.item,
            "score": self.score,
            "paths": [
                {"member": p.member, "cluster": p.cluster_id, "tags": list(p.tags), "weight": p.weight}
                for p in self.paths
            ],
        }


def _check_user(forest: Forest, u: int) -> None:
    n = forest.members[0].affiliations.num_users
    if not 0 <= u < n:
        raise UnknownEntityError(f"unknown user index {u} (model has {n} users)")


def _check_item(forest: Forest, i: int) -> None:
    n = forest.members[0].affiliations.num_items
    if not 0 <= i < n:
        raise UnknownEntityError(f"unknown item index {i} (model has {n} items)")


def explain(forest, u: int, i: int) -> Explanation:
    """Shared clusters of ``u`` and ``i`` in every member, with their weights.

    The returned score is accumulated from the listed weights, so it equals
    their sum by construction.
    """
    forest = as_forest(forest)
    _check_user(forest, u)
    _check_item(forest, i)
    paths = []
    for k, member in enumerate(forest.members):
        aff = member.affiliations
        a_u = aff.user_row(u)
        x_i = aff.item_row(i)
        for c in sorted(a_u.keys() & x_i.keys()):
            w = a_u[c] * x_i[c]
            if w > 0:
                labels = tuple(member.clusters.tag_labels(member.clusters.clusters[c]))
                paths.append(ExplanationPath(k, c, labels, w))
    score = float(sum(p.weight for p in paths))
    expl = Explanation(u, i, paths, score)
    expl.text = render_template(expl)
    return expl


def render_template(expl: Explanation) -> str:
    """One line per path, strongest first; ties keep (member, cluster) order."""
    if not expl.paths:
        return NO_PATH_TEXT
    ordered = sorted(expl.paths, key=lambda p: (-p.weight, p.member, p.cluster_id))
    return "\n".join(
        f"Recommended because you like [{', '.join(p.tags)}] (strength {p.weight:.4f})" for p in ordered
    )


def recommend_topk(forest, u: int, K: int, exclude_train=None) -> list[tuple[int, float]]:
    """Top ``K`` items for user ``u`` as ``(item, score)`` pairs.

    Args:
        forest: A :class:`Forest` or single member.
        u: User index.
        K: Number of items to return.
        exclude_train: Optional CSR training matrix; the user's items in it
            are skipped.

    Ties are broken by lower item index.  A user without affiliations in any
    member gets an empty list.
    """
    forest = as_forest(forest)
    _check_user(forest, u)
    if not any(m.affiliations.user_active[u] for m in forest.members):
        log.warning("user %d has no cluster affiliations; nothing to recommend", u)
        return []
    scores = _user_scores(forest, u)
    candidates = np.arange(scores.size)
    if exclude_train is not None:
        seen = exclude_train[u].indices
        candidates = np.setdiff1d(candidates, seen)
    order = np.lexsort((candidates, -scores[candidates]))[:K]
    return [(int(candidates[j]), float(scores[candidates[j]])) for j in order]


def _user_scores(forest: Forest, u: int) -> np.ndarray:
    """Sparse accumulation of ``sum_c a_uc * x_ic`` over members."""
    total = np.zeros(forest.members[0].affiliations.num_items)
    for member in forest.members:
        aff = member.affiliations
        for c, a in aff.user_row(u).items():
            hit = aff.item_index == c
            rows = np.flatnonzero(hit.any(axis=1))
            total[rows] += a * aff.item_weight[hit]
    return total


def recommend_clusters(forest, u: int, K_c: int) -> list[tuple[int, TasteCluster, float]]:
    """Clusters ranked by the user's affiliation, as ``(member, cluster, a_uc)``."""
    forest = as_forest(forest)
    _check_user(forest, u)
    ranked = []
    for k, member in enumerate(forest.members):
        for c, a in member.affiliations.user_row(u).items():
            ranked.append((k, member.clusters.clusters[c], a))
    ranked.sort(key=lambda r: (-r[2], r[0], r[1].cluster_id))
    return ranked[:K_c]


def tag_discovery(forest, i: int, top_q: int, item_tags: Iterable[int] = ()) -> list[tuple[str, float]]:
    """Candidate tags for item ``i`` drawn from its clusters' descriptions.

    A tag ``t`` of cluster ``c`` scores ``sum_c x_ic * beta_ct`` over the
    item's clusters that list it.  Tags already on the item are dropped.
    """
    forest = as_forest(forest)
    _check_item(forest, i)
    own = set(item_tags)
    totals: dict[int, float] = {}
    names = forest.members[0].clusters.tag_names
    for member in forest.members:
        clusters = member.clusters.clusters
        for c, x in member.affiliations.item_row(i).items():
            for t, beta in zip(clusters[c].tags, clusters[c].tag_scores):
                if t not in own:
                    totals[t] = totals.get(t, 0.0) + x * beta
    ranked = sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))[:top_q]
    return [(names[t], s) for t, s in ranked]


def write_explanations(explanations: Iterable[Explanation], out: TextIO) -> None:
    """One JSON object per line with keys user, item, score, paths."""
    for expl in explanations:
        out.write(json.dumps(expl.to_record(), sort_keys=True) + "\n")
