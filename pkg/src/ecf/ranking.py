"""Top-K ranking metrics and batched evaluation over a dataset split."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .data import TEST, TRAIN, VALID, InteractionDataset


def recall_at_k(ranked, truth, k: int) -> float:
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth")
    hits = sum(1 for item in list(ranked)[:k] if item in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k: int) -> float:
    """Binary-gain NDCG with a log2 position discount."""
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth")
    dcg = sum(1.0 / np.log2(r + 2) for r, item in enumerate(list(ranked)[:k]) if item in truth)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(truth), k)))
    return dcg / idcg


def top_k_items(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` highest scores per row; ties go to the lower index."""
    k = min(k, scores.shape[1])
    if k < scores.shape[1]:
        part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        # argpartition ignores index order among equal scores, so widen the
        # candidate set to everything tied with the k-th score before sorting
        kth = np.take_along_axis(scores, part, axis=1).min(axis=1, keepdims=True)
        out = np.empty((scores.shape[0], k), dtype=np.int64)
        for r in range(scores.shape[0]):
            cand = np.flatnonzero(scores[r] >= kth[r])
            order = np.lexsort((cand, -scores[r, cand]))
            out[r] = cand[order[:k]]
        return out
    return np.lexsort((np.broadcast_to(np.arange(scores.shape[1]), scores.shape), -scores), axis=1)[:, :k]


def evaluate_ranking(
    score_fn: Callable[[np.ndarray], np.ndarray],
    ds: InteractionDataset,
    which: int = TEST,
    ks: Iterable[int] = (20,),
    batch_users: int = 512,
) -> dict[str, float]:
    """Average Recall@K and NDCG@K over users with items in split ``which``.

    Items the user has in earlier splits (train, and validation when
    evaluating on test) are excluded from the ranking.
    """
    ks = sorted(set(int(k) for k in ks))
    truth = ds.user_items(which)
    seen = ds.matrix(TRAIN)
    if which == TEST:
        seen = seen + ds.matrix(VALID)
    users = np.array([u for u in range(ds.num_users) if truth[u].size], dtype=np.int64)
    totals = {f"recall@{k}": 0.0 for k in ks} | {f"ndcg@{k}": 0.0 for k in ks}
    if users.size == 0:
        return totals
    kmax = max(ks)
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    for start in range(0, users.size, batch_users):
        batch = users[start : start + batch_users]
        scores = np.array(score_fn(batch), dtype=np.float64)
        rows = seen[batch]
        scores[rows.nonzero()] = -np.inf
        top = top_k_items(scores, kmax)
        for r, u in enumerate(batch):
            hit = np.isin(top[r], truth[u])
            n_truth = truth[u].size
            for k in ks:
                h = hit[:k]
                totals[f"recall@{k}"] += h.sum() / n_truth
                totals[f"ndcg@{k}"] += (discounts[:k] * h).sum() / discounts[: min(n_truth, k)].sum()
    return {name: value / users.size for name, value in totals.items()}
