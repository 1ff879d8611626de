"""Explainability metrics for a set of taste clusters.

Four scores describe how well cluster tags explain cluster members:

* coverage: the share of members carrying at least one cluster tag,
* utilization: the share of the tag vocabulary used by some cluster,
* silhouette: cosine separation of clusters in a reference embedding space,
* informativeness: how well the tags alone identify the members, judged by a
  small tag-to-item classifier.

``overall`` sums each score's gain over a random clustering.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import TasteClusterSet
from .ranking import ndcg_at_k, recall_at_k, top_k_items

log = logging.getLogger(__name__)

__all__ = [
    "recall_at_k",
    "ndcg_at_k",
    "coverage",
    "utilization",
    "silhouette",
    "TagDiscriminator",
    "train_discriminator",
    "informativeness",
    "ExplainabilityReport",
    "explainability_report",
    "overall",
    "format_report_table",
]

METRIC_NAMES = ("coverage", "utilization", "silhouette", "informativeness")
COLUMN_LABELS = ("Cov.", "Util.", "Sil.", "Info.", "Overall")

# cosine distances at or below this are rounding noise of identical vectors
SCALE_EPS = 1e-12


def _nonempty(clusters: TasteClusterSet, what: str):
    kept = [c for c in clusters if c.members]
    skipped = len(clusters) - len(kept)
    if skipped:
        log.warning("%s: skipped %d empty cluster(s)", what, skipped)
    return kept


def coverage(clusters: TasteClusterSet, entries: np.ndarray) -> float:
    """Mean fraction of members sharing at least one tag with their cluster."""
    kept = _nonempty(clusters, "coverage")
    if not kept:
        return 0.0
    fractions = []
    for c in kept:
        members = np.asarray(c.members)
        hit = entries[np.ix_(members, np.asarray(c.tags, dtype=np.int64))].sum(axis=1) > 0
        fractions.append(hit.mean())
    return float(np.mean(fractions))


def utilization(clusters: TasteClusterSet, num_tags: int) -> float:
    """Fraction of the tag vocabulary used by at least one cluster."""
    used = set()
    for c in clusters:
        used.update(c.tags)
    return len(used) / num_tags


def silhouette(clusters: TasteClusterSet, embeddings: np.ndarray) -> float:
    """Average cosine silhouette over ordered cluster pairs.

    ``a(c1)`` is the mean pairwise cosine similarity inside ``c1`` (1 for a
    singleton) and ``b(c1, c2)`` the mean cosine similarity between members
    of ``c1`` and ``c2`` that are not in both.  Each off-diagonal term is the
    classical silhouette on the matching cosine distances ``1 - a`` and
    ``1 - b``, which keeps it in [-1, 1] and positive when clusters are
    tighter than they are close to each other.  Diagonal terms are 0.  The
    sum is divided by the squared number of non-empty clusters.

    Cosine sums are taken through sums of unit vectors, so the cost is
    linear in cluster size rather than quadratic.
    """
    kept = _nonempty(clusters, "silhouette")
    Z = len(kept)
    if Z < 2:
        return 0.0
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    unit = embeddings / np.where(norms > 0, norms, 1.0)
    N = embeddings.shape[0]
    member = np.zeros((Z, N))
    for k, c in enumerate(kept):
        member[k, list(c.members)] = 1.0
    sizes = member.sum(axis=1)
    sums = member @ unit
    sq = np.einsum("ij,ij->i", unit, unit)
    self_sq = member @ sq
    with np.errstate(divide="ignore", invalid="ignore"):
        intra = np.where(sizes > 1, (np.einsum("ij,ij->i", sums, sums) - self_sq) / (sizes * (sizes - 1)), 1.0)
    total = 0.0
    skipped = 0
    for k in range(Z):
        shared = member[k] * member
        shared_sum = shared @ unit
        n_shared = shared.sum(axis=1)
        left = sums[k] - shared_sum
        right = sums - shared_sum
        n_left = sizes[k] - n_shared
        n_right = sizes - n_shared
        for j in range(Z):
            if j == k:
                continue
            if n_left[j] == 0 or n_right[j] == 0:
                skipped += 1
                continue
            b = 1.0 - float(left[j] @ right[j]) / (n_left[j] * n_right[j])
            a = 1.0 - float(intra[k])
            denom = max(a, b)
            if denom <= SCALE_EPS:
                skipped += 1
                continue
            total += (b - a) / denom
    if skipped:
        log.warning("silhouette: skipped %d cluster pair(s) with no disjoint members or zero scale", skipped)
    return total / Z**2


# -- tag discriminator ----------------------------------------------------------------

@dataclass
class TagDiscriminator:
    """Three-layer perceptron from a tag multi-hot vector to an item."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, num_tags: int, num_items: int, hidden: int = 64, seed: int = 0) -> TagDiscriminator:
        rng = np.random.default_rng(seed)
        sizes = [num_tags, hidden, hidden, num_items]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros((1, fan_out)))
        return cls(weights, biases)

    def params(self) -> list[T.Tensor]:
        return [T.Tensor(p) for p in self.weights + self.biases]

    @staticmethod
    def _forward(params: list[T.Tensor], x) -> T.Tensor:
        W1, W2, W3, b1, b2, b3 = params
        h = T.relu(T.matmul(x, W1) + b1)
        h = T.relu(T.matmul(h, W2) + b2)
        return T.matmul(h, W3) + b3

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self._forward(self.params(), T.Tensor(np.atleast_2d(x))).data

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return T.row_softmax(self.logits(x)).data

    def loss(self, x: np.ndarray, targets: np.ndarray) -> float:
        logp = T.row_log_softmax(self.logits(x)).data
        return float(-logp[np.arange(len(targets)), targets].mean())


def _cross_entropy(params, x: np.ndarray, targets: np.ndarray) -> T.Tensor:
    onehot = np.zeros((len(targets), params[2].shape[1]))
    onehot[np.arange(len(targets)), targets] = 1.0
    logp = T.row_log_softmax(TagDiscriminator._forward(params, T.Tensor(x)))
    return -(logp * onehot).sum() / len(targets)


def _mask_tags(entries: np.ndarray, rng: np.random.Generator, keep_prob: float) -> np.ndarray:
    return entries * (rng.random(entries.shape) < keep_prob)


def train_discriminator(
    entries: np.ndarray,
    seed: int = 0,
    hidden: int = 64,
    lr: float = 3e-3,
    batch_size: int = 256,
    mask_prob: float = 0.5,
    patience: int = 10,
    max_epochs: int = 300,
    holdout: float = 0.1,
) -> TagDiscriminator:
    """Fit the tag-to-item classifier with randomly masked tag inputs.

    Every epoch visits each item once with a fresh mask.  A fixed masked copy
    of a random ``holdout`` share of items serves as the validation set; the
    parameters with the lowest validation loss are kept once it has not
    improved for ``patience`` epochs.
    """
    N, num_tags = entries.shape
    rng = np.random.default_rng(seed)
    disc = TagDiscriminator.init(num_tags, N, hidden, seed)
    val_items = np.sort(rng.choice(N, size=max(1, int(round(holdout * N))), replace=False))
    val_x = _mask_tags(entries[val_items], rng, 1.0 - mask_prob)
    params = disc.params()
    state = T.AdamState.for_params(params, lr=lr)
    best, best_params, stale = np.inf, [p.data.copy() for p in params], 0
    for _ in range(max_epochs):
        order = rng.permutation(N)
        for start in range(0, N, batch_size):
            batch = order[start : start + batch_size]
            x = _mask_tags(entries[batch], rng, 1.0 - mask_prob)
            for p in params:
                p.requires_grad = True
                p.zero_grad()
            with T.Tape() as tape:
                loss = _cross_entropy(params, x, batch)
            tape.backward(loss)
            T.adam_step(state, params, [p.grad for p in params])
        for p in params:
            p.requires_grad = False
        val = float(_cross_entropy(params, val_x, val_items).data)
        disc.history.append(val)
        if val < best - 1e-12:
            best, best_params, stale = val, [p.data.copy() for p in params], 0
        else:
            stale += 1
            if stale >= patience:
                break
    disc.weights = best_params[:3]
    disc.biases = best_params[3:]
    return disc


def informativeness(clusters: TasteClusterSet, discriminator: TagDiscriminator, num_tags: int) -> float:
    """Mean share of each cluster recovered by the discriminator from its tags.

    The discriminator ranks all items given the cluster's tag multi-hot
    vector; the top ``|c|`` are compared with the members.
    """
    kept = _nonempty(clusters, "informativeness")
    if not kept:
        return 0.0
    x = np.zeros((len(kept), num_tags))
    for k, c in enumerate(kept):
        x[k, list(c.tags)] = 1.0
    proba = discriminator.predict_proba(x)
    scores = []
    for k, c in enumerate(kept):
        top = top_k_items(proba[k : k + 1], c.size)[0]
        scores.append(np.intersect1d(top, c.members).size / c.size)
    return float(np.mean(scores))


# -- reports --------------------------------------------------------------------------

@dataclass
class ExplainabilityReport:
    coverage: float
    utilization: float
    silhouette: float
    informativeness: float
    overall: float | None = None
    details: list[dict] = field(default_factory=list)

    def values(self) -> tuple[float, float, float, float]:
        return (self.coverage, self.utilization, self.silhouette, self.informativeness)


def overall(report: ExplainabilityReport, random_report: ExplainabilityReport) -> float:
    """Summed gain of the four metrics over the random clustering."""
    return float(sum(v - r for v, r in zip(report.values(), random_report.values())))


def _cluster_details(clusters: TasteClusterSet, entries: np.ndarray) -> list[dict]:
    rows = []
    for c in clusters:
        covered = 0.0
        if c.members:
            hit = entries[np.ix_(list(c.members), list(c.tags))].sum(axis=1) > 0
            covered = float(hit.mean())
        rows.append({"cluster": c.cluster_id, "size": c.size, "tags": clusters.tag_labels(c), "coverage": covered})
    return rows


def explainability_report(
    clusters: TasteClusterSet,
    entries: np.ndarray,
    embeddings: np.ndarray,
    discriminator: TagDiscriminator,
) -> ExplainabilityReport:
    """All four metrics for one clustering; ``overall`` is left unset."""
    return ExplainabilityReport(
        coverage=coverage(clusters, entries),
        utilization=utilization(clusters, entries.shape[1]),
        silhouette=silhouette(clusters, embeddings),
        informativeness=informativeness(clusters, discriminator, entries.shape[1]),
        details=_cluster_details(clusters, entries),
    )


def format_report_table(reports: dict[str, ExplainabilityReport], random_key: str = "Random") -> str:
    """Tab-separated table, one row per method, four decimals.

    ``overall`` is taken from the report when set, else computed against the
    ``random_key`` row.
    """
    width = max(len(name) for name in reports) if reports else 6
    lines = ["\t".join([f"{'Method':<{width}}", *COLUMN_LABELS])]
    base = reports.get(random_key)
    for name, rep in reports.items():
        total = rep.overall
        if total is None:
            total = overall(rep, base) if base is not None else float("nan")
        cells = [f"{v:.4f}" for v in (*rep.values(), total)]
        lines.append("\t".join([f"{name:<{width}}", *cells]))
    return "\n".join(lines)
