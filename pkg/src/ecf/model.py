"""Taste-cluster collaborative filtering: affiliations, scores and losses.

Users, items and taste clusters share one embedding space.  An item belongs
to the ``item_topk`` clusters its embedding is most cosine-similar to; a
user belongs to the ``user_topk`` clusters with the highest aggregated
similarity over the user's training items.  A user-item score is the sum,
over shared clusters, of the product of the two affiliation weights.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .data import IdfWeights, ItemTagMatrix
from .tensor import Tensor

log = logging.getLogger(__name__)

TAG_LOG_EPS = 1e-9
INDEPENDENCE_VARIANTS = ("mutual_info", "orthogonality", "distance_correlation")


@dataclass
class EcfHyperParams:
    num_clusters: int = 64
    dim: int = 64
    item_topk: int = 20
    user_topk: int = 20
    tags_per_cluster: int = 4
    st_temperature: float = 2.0
    tag_temperature: float = 2.0
    cf_weight: float = 0.6
    independence: str = "mutual_info"
    st_mode: str = "softmax_st"
    tag_softmax: str = "log"
    user_agg: str = "mean"

    def validate(self) -> None:
        if self.num_clusters < 1 or self.dim < 1:
            raise ValueError("num_clusters and dim must be positive")
        if not 1 <= self.item_topk <= self.num_clusters:
            raise ValueError("item_topk must lie in [1, num_clusters]")
        if not 1 <= self.user_topk <= self.num_clusters:
            raise ValueError("user_topk must lie in [1, num_clusters]")
        if self.tags_per_cluster < 1:
            raise ValueError("tags_per_cluster must be positive")
        if self.st_temperature <= 0 or self.tag_temperature <= 0:
            raise ValueError("temperatures must be positive")
        if self.independence not in INDEPENDENCE_VARIANTS:
            raise ValueError(f"unknown independence variant {self.independence!r}")
        if self.st_mode not in ("softmax_st", "sigmoid_only"):
            raise ValueError(f"unknown st_mode {self.st_mode!r}")
        if self.tag_softmax not in ("log", "linear"):
            raise ValueError(f"unknown tag_softmax {self.tag_softmax!r}")
        if self.user_agg not in ("mean", "sum"):
            raise ValueError(f"unknown user_agg {self.user_agg!r}")

    @classmethod
    def from_dict(cls, values: dict) -> EcfHyperParams:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


class EcfModel:
    """User, item and cluster embedding tables plus hyperparameters."""

    def __init__(self, user_emb: np.ndarray, item_emb: np.ndarray, cluster_emb: np.ndarray, hp: EcfHyperParams) -> None:
        hp.validate()
        self.hp = hp
        self.U = Tensor(user_emb, requires_grad=True)
        self.V = Tensor(item_emb, requires_grad=True)
        self.H = Tensor(cluster_emb, requires_grad=True)
        if self.H.shape != (hp.num_clusters, hp.dim):
            raise T.ShapeError(f"cluster table {self.H.shape} != ({hp.num_clusters}, {hp.dim})")

    @property
    def params(self) -> list[Tensor]:
        return [self.U, self.V, self.H]

    @property
    def num_users(self) -> int:
        return self.U.shape[0]

    @property
    def num_items(self) -> int:
        return self.V.shape[0]

    def copy(self) -> EcfModel:
        return EcfModel(self.U.data.copy(), self.V.data.copy(), self.H.data.copy(), EcfHyperParams(**self.hp.to_dict()))


@dataclass
class LossBreakdown:
    cs: float
    ts: float
    ind: float
    cf: float
    tc: float
    total: float


# -- affiliations ---------------------------------------------------------------

def item_cluster_scores(V, H) -> Tensor:
    return T.row_cosine(V, H)


def item_affiliations(scores, m: int, temperature: float, mode: str = "softmax_st") -> Tensor:
    """Dense item-by-cluster matrix with exactly ``m`` nonzeros per row."""
    scores = T.tensor(scores)
    return T.sigmoid(scores) * T.straight_through_topk(scores, m, temperature, mode)


def interaction_weights(train: sp.csr_matrix, agg: str = "mean") -> sp.csr_matrix:
    """Train matrix, row-normalised to sum 1 for ``agg="mean"``."""
    train = sp.csr_matrix(train, dtype=np.float64)
    if agg == "sum":
        return train
    deg = np.asarray(train.sum(axis=1)).ravel()
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    return sp.diags(inv) @ train


def user_cluster_scores(weights: sp.csr_matrix, item_scores) -> Tensor:
    return T.spmm(weights, item_scores)


def user_affiliations(weights: sp.csr_matrix, item_scores, n: int, temperature: float, mode: str = "softmax_st") -> Tensor:
    """Affiliations for the users whose rows make up ``weights``.

    Rows with no training interaction come back all-zero.
    """
    scores = user_cluster_scores(weights, item_scores)
    aff = T.sigmoid(scores) * T.straight_through_topk(scores, n, temperature, mode)
    active = np.diff(sp.csr_matrix(weights).indptr) > 0
    if not active.all():
        aff = aff * active[:, None].astype(np.float64)
    return aff


def predict(a_u, x_i) -> float:
    """Sparse dot product of two ``{cluster: weight}`` rows."""
    a_u, x_i = dict(a_u), dict(x_i)
    return float(sum(a_u[c] * x_i[c] for c in sorted(a_u.keys() & x_i.keys())))


def predict_rows(A_rows, X_rows) -> Tensor:
    return T.tsum(T.tensor(A_rows) * T.tensor(X_rows), axis=1)


# -- losses ---------------------------------------------------------------------

def bpr_loss(pos, neg) -> Tensor:
    return -T.tsum(T.log_sigmoid(T.tensor(pos) - T.tensor(neg)))


def loss_cf(U, V, triplets: np.ndarray) -> Tensor:
    u = T.gather_rows(U, triplets[:, 0])
    pos = T.tsum(u * T.gather_rows(V, triplets[:, 1]), axis=1)
    neg = T.tsum(u * T.gather_rows(V, triplets[:, 2]), axis=1)
    return bpr_loss(pos, neg)


def tag_distribution(X, E) -> Tensor:
    return T.matmul(T.transpose(X), T.tensor(E))


def tag_log_scores(dist, idf: np.ndarray, temperature: float, form: str = "log") -> Tensor:
    """Row-wise log of the tag scores ``beta`` (clusters by tags)."""
    weighted = T.tensor(dist) * np.asarray(idf, dtype=np.float64)[None, :]
    if form == "linear":
        return T.row_log_softmax(weighted, temperature)
    # idf of a tag on every item is about -1e-8, so clamp before the log
    return T.row_log_softmax(T.log(T.relu(weighted) + TAG_LOG_EPS), temperature)


def tag_scores(dist, idf: np.ndarray, temperature: float, form: str = "log") -> Tensor:
    return T.exp(tag_log_scores(dist, idf, temperature, form))


def loss_ts(log_beta, P: int) -> Tensor:
    log_beta = T.tensor(log_beta)
    P = min(P, log_beta.shape[1])
    mask = T.topk_mask(log_beta.data, P)
    return -T.tsum(log_beta * mask)


def loss_ind(H, variant: str = "mutual_info") -> Tensor:
    H = T.tensor(H)
    Z = H.shape[0]
    if Z < 2:
        log.warning("independence loss needs at least two clusters; returning 0")
        return T.tsum(H * 0.0)
    if variant == "mutual_info":
        logp = T.row_log_softmax(T.row_cosine(H, H))
        return -T.tsum(logp * np.eye(Z))
    if variant == "orthogonality":
        off = T.matmul(H, T.transpose(H)) * (1.0 - np.eye(Z))
        return T.sqrt(T.tsum(off * off))
    if variant == "distance_correlation":
        return _distance_correlation(H)
    raise ValueError(f"unknown independence variant {variant!r}")


def _distance_correlation(H: Tensor) -> Tensor:
    Z, d = H.shape
    dist = T.absolute(T.reshape(H, (Z, d, 1)) - T.reshape(H, (Z, 1, d)))
    centered = (
        dist
        - T.mean(dist, axis=1, keepdims=True)
        - T.mean(dist, axis=2, keepdims=True)
        + T.mean(dist, axis=(1, 2), keepdims=True)
    )
    flat = T.reshape(centered, (Z, d * d))
    dcov2 = T.matmul(flat, T.transpose(flat)) * (1.0 / (d * d))
    dcov = T.sqrt(T.relu(dcov2) + 1e-12)
    dvar = T.tsum(dcov * np.eye(Z), axis=1)
    denom = T.sqrt(T.reshape(dvar, (Z, 1)) * T.reshape(dvar, (1, Z)))
    return T.tsum((dcov / denom) * np.triu(np.ones((Z, Z)), k=1))


# -- full objective ---------------------------------------------------------------

class EcfObjective:
    """Dataset-bound pieces of the training loss.

    ``train`` is the binary training interaction matrix, ``tags`` the item
    tag matrix and ``idf`` its inverse document frequencies.
    """

    def __init__(self, train: sp.csr_matrix, tags: ItemTagMatrix | np.ndarray, idf: IdfWeights | np.ndarray, hp: EcfHyperParams) -> None:
        self.hp = hp
        self.weights = interaction_weights(train, hp.user_agg)
        self.E = tags.entries if isinstance(tags, ItemTagMatrix) else np.asarray(tags, dtype=np.float64)
        self.idf = idf.weights if isinstance(idf, IdfWeights) else np.asarray(idf, dtype=np.float64)

    def __call__(self, model: EcfModel, triplets: np.ndarray, tag_scope: str = "full"):
        """Return ``(loss, breakdown, activated)`` for one batch.

        ``activated`` flags clusters present in the affiliation masks of the
        batch's users and items.
        """
        hp = self.hp
        triplets = np.asarray(triplets, dtype=np.int64)
        scores = item_cluster_scores(model.V, model.H)
        X = item_affiliations(scores, hp.item_topk, hp.st_temperature, hp.st_mode)

        users, user_pos = np.unique(triplets[:, 0], return_inverse=True)
        A_users = user_affiliations(self.weights[users], scores, hp.user_topk, hp.st_temperature, hp.st_mode)
        A = T.gather_rows(A_users, user_pos)
        pos = predict_rows(A, T.gather_rows(X, triplets[:, 1]))
        neg = predict_rows(A, T.gather_rows(X, triplets[:, 2]))
        l_cs = bpr_loss(pos, neg)

        batch_items = np.unique(triplets[:, 1:])
        if tag_scope == "batch":
            dist = tag_distribution(T.gather_rows(X, batch_items), self.E[batch_items])
        elif tag_scope == "full":
            dist = tag_distribution(X, self.E)
        else:
            raise ValueError(f"unknown tag scope {tag_scope!r}")
        l_ts = loss_ts(tag_log_scores(dist, self.idf, hp.tag_temperature, hp.tag_softmax), hp.tags_per_cluster)
        l_ind = loss_ind(model.H, hp.independence)
        l_cf = loss_cf(model.U, model.V, triplets)

        l_tc = l_cs + l_ts + l_ind
        total = l_tc + l_cf * hp.cf_weight
        activated = (X.data[batch_items] > 0).any(axis=0) | (A_users.data > 0).any(axis=0)
        breakdown = LossBreakdown(
            cs=l_cs.item(),
            ts=l_ts.item(),
            ind=l_ind.item(),
            cf=l_cf.item(),
            tc=l_tc.item(),
            total=total.item(),
        )
        return total, breakdown, activated


# -- inference-time structures ----------------------------------------------------

@dataclass(frozen=True)
class SparseAffiliations:
    """Top-m item and Top-n user cluster affiliations as index/weight pairs.

    Rows are ordered by descending underlying score.  Users without training
    interactions have ``user_active`` False and all-zero weights.
    """

    num_clusters: int
    item_index: np.ndarray
    item_weight: np.ndarray
    user_index: np.ndarray
    user_weight: np.ndarray
    user_active: np.ndarray

    @property
    def num_items(self) -> int:
        return self.item_index.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_index.shape[0]

    def item_row(self, i: int) -> dict[int, float]:
        return dict(zip(self.item_index[i].tolist(), self.item_weight[i].tolist()))

    def user_row(self, u: int) -> dict[int, float]:
        if not self.user_active[u]:
            return {}
        return dict(zip(self.user_index[u].tolist(), self.user_weight[u].tolist()))

    def item_dense(self) -> np.ndarray:
        out = np.zeros((self.num_items, self.num_clusters))
        np.put_along_axis(out, self.item_index, self.item_weight, axis=1)
        return out

    def user_dense(self) -> np.ndarray:
        out = np.zeros((self.num_users, self.num_clusters))
        np.put_along_axis(out, self.user_index, self.user_weight, axis=1)
        out[~self.user_active] = 0.0
        return out

    def members(self) -> list[np.ndarray]:
        """Items affiliated with each cluster."""
        Z = self.num_clusters
        items = np.repeat(np.arange(self.num_items), self.item_index.shape[1])
        clusters = self.item_index.ravel()
        order = np.lexsort((items, clusters))
        bounds = np.searchsorted(clusters[order], np.arange(Z + 1))
        return [items[order][bounds[c] : bounds[c + 1]] for c in range(Z)]


def _topk_rows(scores: np.ndarray, k: int) -> np.ndarray:
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def compute_affiliations(model: EcfModel, train: sp.csr_matrix) -> SparseAffiliations:
    """Hard affiliations of every user and item under the current embeddings."""
    hp = model.hp
    scores = item_cluster_scores(model.V.data, model.H.data).data
    item_idx = _topk_rows(scores, hp.item_topk)
    item_w = T._sigmoid(np.take_along_axis(scores, item_idx, axis=1))
    weights = interaction_weights(train, hp.user_agg)
    user_scores = np.asarray(weights @ scores)
    user_idx = _topk_rows(user_scores, hp.user_topk)
    user_w = T._sigmoid(np.take_along_axis(user_scores, user_idx, axis=1))
    active = np.diff(weights.indptr) > 0
    user_w[~active] = 0.0
    return SparseAffiliations(hp.num_clusters, item_idx, item_w, user_idx, user_w, active)


@dataclass(frozen=True)
class TasteCluster:
    cluster_id: int
    members: tuple[int, ...]
    tags: tuple[int, ...]
    tag_scores: tuple[float, ...]

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class TasteClusterSet:
    clusters: tuple[TasteCluster, ...]
    tag_names: tuple[str, ...]
    num_items: int

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    @property
    def empty_clusters(self) -> list[int]:
        return [c.cluster_id for c in self.clusters if not c.members]

    def tag_labels(self, cluster: TasteCluster) -> list[str]:
        return [self.tag_names[t] for t in cluster.tags]

    def mean_size(self) -> float:
        sizes = [c.size for c in self.clusters if c.size]
        return float(np.mean(sizes)) if sizes else 0.0


def cluster_tag_scores(aff: SparseAffiliations, tags: ItemTagMatrix, idf: IdfWeights, hp: EcfHyperParams) -> np.ndarray:
    """``beta`` for every cluster under the hard affiliations."""
    dist = aff.item_dense().T @ tags.entries
    return tag_scores(dist, idf.weights, hp.tag_temperature, hp.tag_softmax).data


def extract_clusters(model: EcfModel, aff: SparseAffiliations, tags: ItemTagMatrix, idf: IdfWeights) -> TasteClusterSet:
    """Member items and Top-P descriptive tags of every cluster."""
    hp = model.hp
    beta = cluster_tag_scores(aff, tags, idf, hp)
    P = min(hp.tags_per_cluster, tags.num_tags)
    top = _topk_rows(beta, P)
    members = aff.members()
    clusters = tuple(
        TasteCluster(
            cluster_id=c,
            members=tuple(members[c].tolist()),
            tags=tuple(top[c].tolist()),
            tag_scores=tuple(beta[c, top[c]].tolist()),
        )
        for c in range(hp.num_clusters)
    )
    result = TasteClusterSet(clusters, tags.tag_names, tags.num_items)
    if result.empty_clusters:
        log.warning("%d empty taste cluster(s): %s", len(result.empty_clusters), result.empty_clusters)
    return result
