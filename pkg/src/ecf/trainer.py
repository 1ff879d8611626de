"""Training loops for single models, forests and the BPR-MF baseline, plus
model persistence."""
from __future__ import annotations

import io
import json
import logging
import zipfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import (
    TRAIN,
    VALID,
    DataError,
    IdfWeights,
    InteractionDataset,
    ItemTagMatrix,
    NegativeSampler,
    compute_idf,
    epoch_triplets,
)
from .model import (
    EcfHyperParams,
    EcfModel,
    EcfObjective,
    SparseAffiliations,
    TasteCluster,
    TasteClusterSet,
    compute_affiliations,
    extract_clusters,
    loss_cf,
)
from .ranking import evaluate_ranking

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    """Training diverged or could not start."""


class ModelFormatError(ValueError):
    """A model file is unreadable, truncated or of an unsupported version."""


@dataclass
class TrainConfig(EcfHyperParams):
    epochs_max: int = 500
    batch_size: int = 1024
    patience: int = 10
    eval_k: int = 20
    lr: float = 1e-3
    seed: int = 0
    init_std: float = 0.01
    tag_dist_scope: str = "full"
    activated_only: bool = True

    def validate(self) -> None:
        super().validate()
        for name in ("epochs_max", "batch_size", "patience", "eval_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.patience > self.epochs_max:
            raise ValueError("patience cannot exceed epochs_max")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tag_dist_scope not in ("full", "batch"):
            raise ValueError(f"unknown tag_dist_scope {self.tag_dist_scope!r}")

    def hyperparams(self) -> EcfHyperParams:
        return EcfHyperParams(**{f.name: getattr(self, f.name) for f in fields(EcfHyperParams)})


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class EarlyStopper:
    """Signals a stop after ``patience`` consecutive non-improving updates."""

    def __init__(self, patience: int) -> None:
        self.patience = patience
        self.best = -np.inf
        self.bad = 0

    def update(self, metric: float) -> tuple[bool, bool]:
        """Return ``(improved, stop)``."""
        if metric > self.best:
            self.best = metric
            self.bad = 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


# -- scorers ------------------------------------------------------------------------

@dataclass
class EcfMember:
    """One trained model with its hard affiliations and extracted clusters."""

    model: EcfModel | None
    affiliations: SparseAffiliations
    clusters: TasteClusterSet
    seed: int
    history: TrainHistory = field(default_factory=TrainHistory)
    hyperparams: EcfHyperParams | None = None

    @property
    def hp(self) -> EcfHyperParams | None:
        if self.hyperparams is not None:
            return self.hyperparams
        return None if self.model is None else self.model.hp

    def scores(self, users) -> np.ndarray:
        aff = self.affiliations
        A = aff.user_dense()[np.asarray(users)]
        return A @ aff.item_dense().T


@dataclass
class Forest:
    members: list[EcfMember]
    hyperparams: EcfHyperParams

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.members]

    def scores(self, users) -> np.ndarray:
        users = np.asarray(users)
        total = np.zeros((users.size, self.members[0].affiliations.num_items))
        for m in self.members:
            total += m.scores(users)
        return total


@dataclass
class MfModel:
    user_emb: np.ndarray
    item_emb: np.ndarray
    seed: int = 0
    history: TrainHistory = field(default_factory=TrainHistory)

    def scores(self, users) -> np.ndarray:
        return self.user_emb[np.asarray(users)] @ self.item_emb.T


@dataclass
class MfForest:
    members: list[MfModel]

    def scores(self, users) -> np.ndarray:
        return sum(m.scores(users) for m in self.members)


# -- training -----------------------------------------------------------------------

def _init_model(ds: InteractionDataset, config: TrainConfig, rng: np.random.Generator) -> EcfModel:
    Z, d, std = config.num_clusters, config.dim, config.init_std
    if Z > ds.num_items:
        raise DataError(f"cannot seed {Z} clusters from {ds.num_items} items")
    U = rng.normal(0.0, std, size=(ds.num_users, d))
    V = rng.normal(0.0, std, size=(ds.num_items, d))
    seeds = rng.choice(ds.num_items, size=Z, replace=False)
    H = V[seeds] + rng.normal(0.0, std, size=(Z, d))
    return EcfModel(U, V, H, config.hyperparams())


def _has_validation(ds: InteractionDataset) -> bool:
    return ds.split is not None and bool(np.any(ds.split == VALID))


def _validation_metric(scorer, ds: InteractionDataset, k: int) -> float:
    return evaluate_ranking(scorer.scores, ds, VALID, ks=(k,))[f"recall@{k}"]


def _snapshot(model: EcfModel, train, tags: ItemTagMatrix, idf: IdfWeights, seed: int, history: TrainHistory) -> EcfMember:
    aff = compute_affiliations(model, train)
    return EcfMember(model.copy(), aff, extract_clusters(model, aff, tags, idf), seed, history)


def train_single(
    ds: InteractionDataset,
    tags: ItemTagMatrix,
    config: TrainConfig,
    seed: int | None = None,
    val_metric: Callable[[EcfMember, int], float] | None = None,
) -> EcfMember:
    """Train one model and return its best-validation snapshot.

    Without a validation split (and no ``val_metric``) the loop runs for
    ``epochs_max`` epochs and returns the final state.  ``val_metric``
    replaces validation Recall@``eval_k`` as the early-stopping signal.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    if ds.part(TRAIN)[0].size == 0:
        raise DataError("training split is empty")
    if tags.num_items != ds.num_items:
        raise DataError(f"tag matrix has {tags.num_items} items, dataset has {ds.num_items}")
    rng = np.random.default_rng(seed)
    model = _init_model(ds, config, rng)
    idf = compute_idf(tags)
    train = ds.matrix(TRAIN)
    objective = EcfObjective(train, tags, idf, model.hp)
    state = T.AdamState.for_params(model.params, lr=config.lr)
    sampler = NegativeSampler(ds)
    stopper = EarlyStopper(config.patience)
    history = TrainHistory()
    use_val = val_metric is not None or _has_validation(ds)
    best: EcfMember | None = None

    for epoch in range(config.epochs_max):
        epoch_loss = 0.0
        for batch in epoch_triplets(ds, config.batch_size, rng, sampler):
            for p in model.params:
                p.zero_grad()
            try:
                with T.Tape() as tape:
                    loss, parts, activated = objective(model, batch, config.tag_dist_scope)
                tape.backward(loss)
                rows = [None, None, activated] if config.activated_only else None
                T.adam_step(state, model.params, [p.grad for p in model.params], rows)
            except T.NonFiniteError as exc:
                raise TrainingError(
                    f"seed {seed}, epoch {epoch}, step {state.step}: {exc}; last losses {history.losses[-3:]}"
                ) from exc
            history.losses.append(parts.total)
            epoch_loss += parts.total
        history.epoch_losses.append(epoch_loss)
        if not use_val:
            continue
        snap = _snapshot(model, train, tags, idf, seed, history)
        metric = val_metric(snap, epoch) if val_metric else _validation_metric(snap, ds, config.eval_k)
        history.val_metric.append(metric)
        log.info("seed %d epoch %d loss %.4f val %.4f", seed, epoch, epoch_loss, metric)
        improved, stop = stopper.update(metric)
        if improved:
            best, history.best_epoch = snap, epoch
        if stop:
            history.stopped_early = True
            break

    if best is None:
        best = _snapshot(model, train, tags, idf, seed, history)
        history.best_epoch = config.epochs_max - 1
    best.history = history
    return best


def _train_member(args) -> EcfMember:
    ds, tags, config, seed = args
    return train_single(ds, tags, config, seed)


def train_forest(ds: InteractionDataset, tags: ItemTagMatrix, config: TrainConfig, F: int = 9, n_jobs: int = 1) -> Forest:
    """Train ``F`` independently seeded models (seeds ``config.seed + k``)."""
    if F < 1:
        raise ValueError("forest size must be positive")
    jobs = [(ds, tags, config, config.seed + k) for k in range(F)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            members = list(pool.map(_train_member, jobs))
    else:
        members = [_train_member(job) for job in jobs]
    return Forest(members, config.hyperparams())


def train_mf(ds: InteractionDataset, config: TrainConfig, seed: int | None = None) -> MfModel:
    """BPR matrix factorisation with the same optimiser and stopping rule."""
    config.validate()
    seed = config.seed if seed is None else seed
    if ds.part(TRAIN)[0].size == 0:
        raise DataError("training split is empty")
    rng = np.random.default_rng(seed)
    U = T.Tensor(rng.normal(0.0, config.init_std, size=(ds.num_users, config.dim)), requires_grad=True)
    V = T.Tensor(rng.normal(0.0, config.init_std, size=(ds.num_items, config.dim)), requires_grad=True)
    state = T.AdamState.for_params([U, V], lr=config.lr)
    sampler = NegativeSampler(ds)
    stopper = EarlyStopper(config.patience)
    history = TrainHistory()
    use_val = _has_validation(ds)
    best: MfModel | None = None
    for epoch in range(config.epochs_max):
        epoch_loss = 0.0
        for batch in epoch_triplets(ds, config.batch_size, rng, sampler):
            U.zero_grad()
            V.zero_grad()
            with T.Tape() as tape:
                loss = loss_cf(U, V, batch)
            tape.backward(loss)
            T.adam_step(state, [U, V], [U.grad, V.grad])
            history.losses.append(loss.item())
            epoch_loss += loss.item()
        history.epoch_losses.append(epoch_loss)
        if not use_val:
            continue
        snap = MfModel(U.data.copy(), V.data.copy(), seed)
        metric = _validation_metric(snap, ds, config.eval_k)
        history.val_metric.append(metric)
        improved, stop = stopper.update(metric)
        if improved:
            best, history.best_epoch = snap, epoch
        if stop:
            history.stopped_early = True
            break
    if best is None:
        best = MfModel(U.data.copy(), V.data.copy(), seed)
        history.best_epoch = config.epochs_max - 1
    best.history = history
    return best


def train_mf_forest(ds: InteractionDataset, config: TrainConfig, F: int = 9) -> MfForest:
    return MfForest([train_mf(ds, config, config.seed + k) for k in range(F)])


# -- persistence ------------------------------------------------------------------------
#
# A model file is a zip archive of .npy arrays (little-endian float64 / int64)
# plus a JSON header stored as the uint8 array "header".  Entry timestamps are
# pinned so identical models produce identical bytes.  Per member k:
#   m{k}.U, m{k}.V, m{k}.H                  embeddings (omitted when
#                                           has_embeddings is false)
#   m{k}.item_index, m{k}.item_weight       Top-m item affiliations
#   m{k}.user_index, m{k}.user_weight       Top-n user affiliations
#   m{k}.user_active                        uint8 flag per user
#   m{k}.cluster_tags, m{k}.cluster_tag_scores

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


def _write_archive(path: Path, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, _npy_bytes(arr))


def _member_arrays(k: int, member: EcfMember, with_embeddings: bool) -> dict[str, np.ndarray]:
    aff = member.affiliations
    out: dict[str, np.ndarray] = {}
    if with_embeddings:
        if member.model is None:
            raise ValueError("member has no embeddings to save")
        out[f"m{k}.U"] = member.model.U.data.astype("<f8")
        out[f"m{k}.V"] = member.model.V.data.astype("<f8")
        out[f"m{k}.H"] = member.model.H.data.astype("<f8")
    out[f"m{k}.item_index"] = aff.item_index.astype("<i8")
    out[f"m{k}.item_weight"] = aff.item_weight.astype("<f8")
    out[f"m{k}.user_index"] = aff.user_index.astype("<i8")
    out[f"m{k}.user_weight"] = aff.user_weight.astype("<f8")
    out[f"m{k}.user_active"] = aff.user_active.astype(np.uint8)
    out[f"m{k}.cluster_tags"] = np.array([c.tags for c in member.clusters], dtype="<i8")
    out[f"m{k}.cluster_tag_scores"] = np.array([c.tag_scores for c in member.clusters], dtype="<f8")
    return out


def save_model(obj, path, with_embeddings: bool = True) -> None:
    """Write an :class:`EcfMember`, :class:`Forest`, :class:`MfModel` or
    :class:`MfForest` to ``path``."""
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    header: dict = {"format_version": FORMAT_VERSION, "has_embeddings": with_embeddings}
    if isinstance(obj, (EcfMember, Forest)):
        members = [obj] if isinstance(obj, EcfMember) else obj.members
        hp = obj.hp if isinstance(obj, EcfMember) else obj.hyperparams
        header.update(
            kind="ecf" if isinstance(obj, EcfMember) else "forest",
            hyperparams=hp.to_dict() if hp is not None else None,
            seeds=[m.seed for m in members],
            tag_names=list(members[0].clusters.tag_names),
            num_items=members[0].clusters.num_items,
            num_users=members[0].affiliations.num_users,
        )
        for k, m in enumerate(members):
            arrays.update(_member_arrays(k, m, with_embeddings))
    elif isinstance(obj, (MfModel, MfForest)):
        members = [obj] if isinstance(obj, MfModel) else obj.members
        header.update(kind="mf" if isinstance(obj, MfModel) else "mf_forest", seeds=[m.seed for m in members], has_embeddings=True)
        for k, m in enumerate(members):
            arrays[f"m{k}.U"] = m.user_emb.astype("<f8")
            arrays[f"m{k}.V"] = m.item_emb.astype("<f8")
        header.update(num_users=members[0].user_emb.shape[0], num_items=members[0].item_emb.shape[0])
    else:
        raise TypeError(f"cannot save {type(obj).__name__}")
    header["num_members"] = len(members)
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8), **arrays}
    _write_archive(path, arrays)


def _read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {name: npz[name] for name in npz.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ModelFormatError(f"{path}: unreadable model file ({exc})") from exc
    if "header" not in arrays:
        raise ModelFormatError(f"{path}: missing header")
    header = json.loads(arrays.pop("header").tobytes().decode())
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    return header, arrays


def _load_member(k: int, header: dict, arrays: dict[str, np.ndarray], with_embeddings: bool) -> EcfMember:
    try:
        aff = SparseAffiliations(
            num_clusters=header["hyperparams"]["num_clusters"],
            item_index=arrays[f"m{k}.item_index"],
            item_weight=arrays[f"m{k}.item_weight"],
            user_index=arrays[f"m{k}.user_index"],
            user_weight=arrays[f"m{k}.user_weight"],
            user_active=arrays[f"m{k}.user_active"].astype(bool),
        )
        members = aff.members()
        tags = arrays[f"m{k}.cluster_tags"]
        scores = arrays[f"m{k}.cluster_tag_scores"]
        clusters = TasteClusterSet(
            tuple(
                TasteCluster(c, tuple(members[c].tolist()), tuple(tags[c].tolist()), tuple(scores[c].tolist()))
                for c in range(aff.num_clusters)
            ),
            tuple(header["tag_names"]),
            header["num_items"],
        )
        hp = EcfHyperParams.from_dict(header["hyperparams"])
        model = None
        if with_embeddings and header["has_embeddings"]:
            model = EcfModel(arrays[f"m{k}.U"], arrays[f"m{k}.V"], arrays[f"m{k}.H"], hp)
    except KeyError as exc:
        raise ModelFormatError(f"missing block {exc}") from exc
    return EcfMember(model, aff, clusters, header["seeds"][k], hyperparams=hp)


def load_model(path, with_embeddings: bool = True):
    """Inverse of :func:`save_model`.

    ``with_embeddings=False`` loads only the sparse affiliations and
    clusters, which is all inference needs.
    """
    header, arrays = _read_archive(path)
    kind = header.get("kind")
    n = header["num_members"]
    if kind in ("ecf", "forest"):
        members = [_load_member(k, header, arrays, with_embeddings) for k in range(n)]
        if kind == "ecf":
            return members[0]
        return Forest(members, EcfHyperParams.from_dict(header["hyperparams"]))
    if kind in ("mf", "mf_forest"):
        try:
            mfs = [MfModel(arrays[f"m{k}.U"], arrays[f"m{k}.V"], header["seeds"][k]) for k in range(n)]
        except KeyError as exc:
            raise ModelFormatError(f"missing block {exc}") from exc
        return mfs[0] if kind == "mf" else MfForest(mfs)
    raise ModelFormatError(f"unknown model kind {kind!r}")


def as_forest(obj) -> Forest:
    """View a single member as a one-member forest."""
    if isinstance(obj, Forest):
        return obj
    if isinstance(obj, EcfMember):
        return Forest([obj], obj.hp)
    raise TypeError(f"expected an ECF model or forest, got {type(obj).__name__}")
