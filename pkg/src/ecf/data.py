"""Interaction and item-tag ingestion, filtering, splitting and BPR sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
UNTAGGED = "__untagged__"
IDF_EPS = 1e-6


class DataError(ValueError):
    """Input data is missing, malformed or inconsistent."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class InteractionDataset:
    """Binary implicit feedback over densely indexed users and items.

    ``split`` assigns each interaction to ``TRAIN``, ``VALID`` or ``TEST``;
    it is ``None`` until :func:`split_dataset` has run.
    """

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    split: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "users", _frozen(np.asarray(self.users, dtype=np.int64)))
        object.__setattr__(self, "items", _frozen(np.asarray(self.items, dtype=np.int64)))
        if self.split is not None:
            object.__setattr__(self, "split", _frozen(np.asarray(self.split, dtype=np.int8)))

    @property
    def num_interactions(self) -> int:
        return int(self.users.size)

    def part(self, which: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(users, items) of one split partition, or of everything for ``None``."""
        if which is None:
            return self.users, self.items
        if self.split is None:
            if which == TRAIN:
                return self.users, self.items
            raise DataError("dataset has not been split")
        sel = self.split == which
        return self.users[sel], self.items[sel]

    def matrix(self, which: int | None = None) -> sp.csr_matrix:
        u, i = self.part(which)
        data = np.ones(u.size, dtype=np.float64)
        return sp.csr_matrix((data, (u, i)), shape=(self.num_users, self.num_items))

    def user_items(self, which: int | None = None) -> list[np.ndarray]:
        m = self.matrix(which)
        return [np.sort(m.indices[m.indptr[u] : m.indptr[u + 1]]) for u in range(self.num_users)]

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.bincount(self.users, minlength=self.num_users),
            np.bincount(self.items, minlength=self.num_items),
        )


@dataclass(frozen=True)
class ItemTagMatrix:
    """Multi-hot item-by-tag matrix with the tag vocabulary.

    ``untagged_items`` lists items that lost every tag to the rarity filter
    (or never had one) and were given the reserved ``__untagged__`` tag.
    """

    entries: np.ndarray
    tag_names: tuple[str, ...]
    untagged_items: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", _frozen(np.asarray(self.entries, dtype=np.float64)))

    @property
    def num_items(self) -> int:
        return self.entries.shape[0]

    @property
    def num_tags(self) -> int:
        return self.entries.shape[1]

    @property
    def tag_frequency(self) -> np.ndarray:
        return self.entries.sum(axis=0).astype(np.int64)

    def item_tags(self, item: int) -> set[int]:
        return set(np.flatnonzero(self.entries[item]).tolist())

    def tag_sets(self) -> list[frozenset[int]]:
        return [frozenset(np.flatnonzero(row).tolist()) for row in self.entries]


@dataclass(frozen=True)
class IdfWeights:
    weights: np.ndarray
    num_items: int
    eps: float = field(default=IDF_EPS)


# -- readers ------------------------------------------------------------------

def _data_lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            yield lineno, line


def load_interactions(path) -> InteractionDataset:
    """Read ``user<TAB>item`` lines (any whitespace separates the two fields).

    Duplicate pairs are dropped.  Users and items are indexed in order of
    first appearance; their original IDs are kept on the dataset.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    pairs: dict[tuple[int, int], None] = {}
    for lineno, line in _data_lines(path):
        fields = line.split("\t") if "\t" in line else line.split()
        fields = [f.strip() for f in fields]
        if len(fields) != 2 or not all(fields):
            raise DataError(f"{path}:{lineno}: expected two non-empty fields, got {line!r}")
        u = user_index.setdefault(fields[0], len(user_index))
        i = item_index.setdefault(fields[1], len(item_index))
        pairs.setdefault((u, i), None)
    if not pairs:
        raise DataError(f"{path}: no interactions")
    arr = np.array(list(pairs), dtype=np.int64)
    return InteractionDataset(
        num_users=len(user_index),
        num_items=len(item_index),
        users=arr[:, 0],
        items=arr[:, 1],
        user_ids=tuple(user_index),
        item_ids=tuple(item_index),
    )


def from_pairs(pairs, user_ids=None, item_ids=None) -> InteractionDataset:
    """Build a dataset from already-indexed ``(user, item)`` pairs."""
    arr = np.unique(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=0)
    if arr.size == 0:
        raise DataError("no interactions")
    num_users = int(arr[:, 0].max()) + 1 if user_ids is None else len(user_ids)
    num_items = int(arr[:, 1].max()) + 1 if item_ids is None else len(item_ids)
    return InteractionDataset(
        num_users=num_users,
        num_items=num_items,
        users=arr[:, 0],
        items=arr[:, 1],
        user_ids=tuple(user_ids) if user_ids is not None else tuple(str(u) for u in range(num_users)),
        item_ids=tuple(item_ids) if item_ids is not None else tuple(str(i) for i in range(num_items)),
    )


def write_id_maps(ds: InteractionDataset, directory) -> None:
    """Write ``users.map`` and ``items.map`` (``index<TAB>original_id``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ids in (("users.map", ds.user_ids), ("items.map", ds.item_ids)):
        with open(directory / name, "w", encoding="utf-8") as fh:
            fh.writelines(f"{idx}\t{orig}\n" for idx, orig in enumerate(ids))


def load_item_tags(path, ds: InteractionDataset, min_tag_items: int = 10, dropped_items=()) -> ItemTagMatrix:
    """Read ``item<TAB>tag1|tag2|...`` lines aligned to ``ds``'s item order.

    Tags carried by fewer than ``min_tag_items`` items are removed.  IDs in
    ``dropped_items`` (e.g. items removed by k-core filtering) are skipped
    silently; any other ID missing from ``ds`` is an error.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    index = {iid: k for k, iid in enumerate(ds.item_ids)}
    dropped = set(dropped_items)
    raw: dict[int, set[str]] = {}
    unknown: list[str] = []
    for lineno, line in _data_lines(path):
        head, sep, rest = line.partition("\t")
        if not sep:
            parts = line.split(None, 1)
            head, rest = parts[0], parts[1] if len(parts) > 1 else ""
        head = head.strip()
        if not head:
            raise DataError(f"{path}:{lineno}: missing item id")
        if head not in index:
            if head not in dropped:
                unknown.append(head)
            continue
        tags = {t.strip() for t in rest.split("|") if t.strip()}
        raw.setdefault(index[head], set()).update(tags)
    if unknown:
        shown = ", ".join(unknown[:20])
        raise DataError(f"{path}: {len(unknown)} unknown item id(s): {shown}")
    return build_tag_matrix(raw, ds.num_items, min_tag_items)


def build_tag_matrix(item_tags: dict[int, set[str]], num_items: int, min_tag_items: int = 10) -> ItemTagMatrix:
    counts: dict[str, int] = {}
    for tags in item_tags.values():
        for t in tags:
            counts[t] = counts.get(t, 0) + 1
    kept = sorted(t for t, c in counts.items() if c >= min_tag_items)
    removed = len(counts) - len(kept)
    if removed:
        log.info("removed %d tag(s) carried by fewer than %d items", removed, min_tag_items)
    col = {t: k for k, t in enumerate(kept)}
    entries = np.zeros((num_items, len(kept)), dtype=np.float64)
    for item, tags in item_tags.items():
        for t in tags:
            if t in col:
                entries[item, col[t]] = 1.0
    untagged = np.flatnonzero(entries.sum(axis=1) == 0)
    names = tuple(kept)
    if untagged.size:
        log.warning("%d item(s) have no tag after filtering; assigning %s", untagged.size, UNTAGGED)
        extra = np.zeros((num_items, 1))
        extra[untagged, 0] = 1.0
        entries = np.hstack([entries, extra])
        names = names + (UNTAGGED,)
    return ItemTagMatrix(entries=entries, tag_names=names, untagged_items=tuple(untagged.tolist()))


def align_tags(tags: ItemTagMatrix, source: InteractionDataset, target: InteractionDataset) -> ItemTagMatrix:
    """Reorder ``tags`` rows (indexed by ``source`` items) to ``target``'s items."""
    pos = {iid: k for k, iid in enumerate(source.item_ids)}
    rows = [pos[iid] for iid in target.item_ids]
    sub = tags.entries[rows]
    keep = sub.sum(axis=0) > 0
    entries = sub[:, keep]
    names = tuple(n for n, k in zip(tags.tag_names, keep) if k)
    untagged: tuple[int, ...] = ()
    if UNTAGGED in names:
        untagged = tuple(np.flatnonzero(entries[:, names.index(UNTAGGED)]).tolist())
    return ItemTagMatrix(entries=entries, tag_names=names, untagged_items=untagged)


# -- filtering and splitting --------------------------------------------------

def kcore_filter(ds: InteractionDataset, k: int) -> InteractionDataset:
    """Repeatedly drop users and items with fewer than ``k`` interactions.

    The result is re-indexed densely (preserving relative order) and
    carries no split.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    users, items = ds.users, ds.items
    keep = np.ones(users.size, dtype=bool)
    while True:
        du = np.bincount(users[keep], minlength=ds.num_users)
        di = np.bincount(items[keep], minlength=ds.num_items)
        bad = keep & ((du[users] < k) | (di[items] < k))
        if not bad.any():
            break
        keep &= ~bad
    if not keep.any():
        raise DataError(f"{k}-core filtering removed every interaction")
    u_keep = np.unique(users[keep])
    i_keep = np.unique(items[keep])
    u_map = np.full(ds.num_users, -1, dtype=np.int64)
    i_map = np.full(ds.num_items, -1, dtype=np.int64)
    u_map[u_keep] = np.arange(u_keep.size)
    i_map[i_keep] = np.arange(i_keep.size)
    return InteractionDataset(
        num_users=int(u_keep.size),
        num_items=int(i_keep.size),
        users=u_map[users[keep]],
        items=i_map[items[keep]],
        user_ids=tuple(ds.user_ids[u] for u in u_keep),
        item_ids=tuple(ds.item_ids[i] for i in i_keep),
    )


def split_dataset(ds: InteractionDataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionDataset:
    """Randomly split each user's interactions into train/validation/test.

    Users with fewer than three interactions keep everything in train.
    Every user with interactions keeps at least one training interaction.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    split = np.zeros(ds.num_interactions, dtype=np.int8)
    order = np.argsort(ds.users, kind="stable")
    bounds = np.searchsorted(ds.users[order], np.arange(ds.num_users + 1))
    for u in range(ds.num_users):
        rows = order[bounds[u] : bounds[u + 1]]
        n = rows.size
        if n < 3:
            continue
        n_val = int(round(n * ratios[1]))
        n_test = int(round(n * ratios[2]))
        while n - n_val - n_test < 1:
            if n_val >= n_test and n_val > 0:
                n_val -= 1
            else:
                n_test -= 1
        perm = rows[rng.permutation(n)]
        split[perm[n - n_val - n_test : n - n_test]] = VALID
        split[perm[n - n_test :]] = TEST
    return replace(ds, split=split)


# -- BPR sampling ---------------------------------------------------------------

class NegativeSampler:
    """Draws items a user has never interacted with, uniformly."""

    def __init__(self, ds: InteractionDataset) -> None:
        self.num_items = ds.num_items
        self._keys = np.unique(ds.users * ds.num_items + ds.items)
        du, _ = ds.degrees()
        self.saturated = du >= ds.num_items

    def is_positive(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = users * self.num_items + items
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, self._keys.size - 1)
        return self._keys[pos] == keys

    def sample(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if self.saturated[users].any():
            raise DataError("cannot sample a negative for a user who interacted with every item")
        neg = rng.integers(0, self.num_items, size=users.size)
        bad = self.is_positive(users, neg)
        while bad.any():
            neg[bad] = rng.integers(0, self.num_items, size=int(bad.sum()))
            bad[bad] = self.is_positive(users[bad], neg[bad])
        return neg


def _train_pool(ds: InteractionDataset, sampler: NegativeSampler) -> tuple[np.ndarray, np.ndarray]:
    u, i = ds.part(TRAIN)
    if u.size == 0:
        raise DataError("training split is empty")
    sat = sampler.saturated[u]
    if sat.any():
        log.warning("skipping %d user(s) who interacted with every item", np.unique(u[sat]).size)
        u, i = u[~sat], i[~sat]
    if u.size == 0:
        raise DataError("no user has an available negative item")
    return u, i


def sample_bpr_triplets(ds: InteractionDataset, batch_size: int, rng: np.random.Generator, sampler: NegativeSampler | None = None) -> np.ndarray:
    """``batch_size`` triplets ``(u, i, j)`` as an int array of shape (B, 3).

    ``(u, i)`` is uniform over training interactions and ``j`` is uniform
    over items ``u`` has no interaction with in any split.
    """
    sampler = sampler or NegativeSampler(ds)
    u, i = _train_pool(ds, sampler)
    pick = rng.integers(0, u.size, size=batch_size)
    users = u[pick]
    return np.stack([users, i[pick], sampler.sample(users, rng)], axis=1)


def epoch_triplets(ds: InteractionDataset, batch_size: int, rng: np.random.Generator, sampler: NegativeSampler | None = None):
    """Yield one shuffled pass over the training interactions in batches."""
    sampler = sampler or NegativeSampler(ds)
    u, i = _train_pool(ds, sampler)
    perm = rng.permutation(u.size)
    for start in range(0, u.size, batch_size):
        rows = perm[start : start + batch_size]
        users = u[rows]
        yield np.stack([users, i[rows], sampler.sample(users, rng)], axis=1)


def compute_idf(tags: ItemTagMatrix) -> IdfWeights:
    n = tags.num_items
    if n < 1:
        raise DataError("no items")
    f = tags.entries.sum(axis=0)
    return IdfWeights(weights=np.log(n / (f + IDF_EPS)), num_items=n)


# -- corpora ------------------------------------------------------------------

def convert_movielens_1m(source_dir, out_dir, min_rating: int = 3) -> tuple[Path, Path]:
    """Turn an ML-1M download into the two text formats read above.

    Ratings at or above ``min_rating`` become interactions; genres become
    tags.  Returns the interactions and tags paths.
    """
    source_dir, out_dir = Path(source_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inter_path = out_dir / "interactions.tsv"
    tags_path = out_dir / "item_tags.tsv"
    rated: set[str] = set()
    with open(source_dir / "ratings.dat", encoding="latin-1") as src, open(inter_path, "w", encoding="utf-8") as dst:
        for line in src:
            user, movie, rating, _ = line.strip().split("::")
            if int(rating) >= min_rating:
                dst.write(f"{user}\t{movie}\n")
                rated.add(movie)
    with open(source_dir / "movies.dat", encoding="latin-1") as src, open(tags_path, "w", encoding="utf-8") as dst:
        for line in src:
            movie, _title, genres = line.rstrip("\n").split("::")
            if movie in rated:
                dst.write(f"{movie}\t{genres}\n")
    return inter_path, tags_path


def synthetic_dataset(
    num_users: int = 200,
    num_items: int = 120,
    num_groups: int = 6,
    tags_per_group: int = 3,
    noise_tags: int = 4,
    interactions_per_user: int = 20,
    seed: int = 0,
) -> tuple[InteractionDataset, ItemTagMatrix]:
    """Planted-taste toy corpus: items belong to groups that share tags,
    and each user mostly consumes items from one or two groups."""
    rng = np.random.default_rng(seed)
    item_group = np.arange(num_items) % num_groups
    rng.shuffle(item_group)
    num_tags = num_groups * tags_per_group + noise_tags
    entries = np.zeros((num_items, num_tags))
    for i, g in enumerate(item_group):
        own = g * tags_per_group + np.arange(tags_per_group)
        entries[i, rng.choice(own, size=rng.integers(1, tags_per_group + 1), replace=False)] = 1.0
        if noise_tags and rng.random() < 0.5:
            entries[i, num_groups * tags_per_group + rng.integers(noise_tags)] = 1.0
    pairs = []
    for u in range(num_users):
        likes = rng.choice(num_groups, size=rng.integers(1, 3), replace=False)
        pool = np.flatnonzero(np.isin(item_group, likes))
        n_in = min(pool.size, int(interactions_per_user * 0.85))
        chosen = set(rng.choice(pool, size=n_in, replace=False).tolist())
        while len(chosen) < interactions_per_user:
            chosen.add(int(rng.integers(num_items)))
        pairs.extend((u, i) for i in sorted(chosen))
    ds = from_pairs(pairs, user_ids=[f"u{u}" for u in range(num_users)], item_ids=[f"i{i}" for i in range(num_items)])
    names = tuple(f"g{t // tags_per_group}_{t % tags_per_group}" for t in range(num_groups * tags_per_group)) + tuple(
        f"noise{t}" for t in range(noise_tags)
    )
    tags = ItemTagMatrix(entries=entries, tag_names=names)
    return ds, tags


def write_dataset(ds: InteractionDataset, tags: ItemTagMatrix | None, directory) -> tuple[Path, Path | None]:
    """Write a dataset (and optionally tags) in the text formats read above."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    inter = directory / "interactions.tsv"
    with open(inter, "w", encoding="utf-8") as fh:
        fh.writelines(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\n" for u, i in zip(ds.users, ds.items))
    if tags is None:
        return inter, None
    tag_path = directory / "item_tags.tsv"
    with open(tag_path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(tags.entries):
            names = [tags.tag_names[t] for t in np.flatnonzero(row) if tags.tag_names[t] != UNTAGGED]
            if names:
                fh.write(f"{ds.item_ids[i]}\t{'|'.join(names)}\n")
    return inter, tag_path


SPLIT_NAMES = ("train", "valid", "test")


def save_prepared(ds: InteractionDataset, tags: ItemTagMatrix, directory) -> Path:
    """Write a split dataset and its tags so :func:`load_prepared` restores it exactly.

    Besides the interaction and tag files and the ID maps, ``split.tsv``
    lists every interaction as ``user_index<TAB>item_index<TAB>split``.
    """
    if ds.split is None:
        raise DataError("dataset has not been split")
    directory = Path(directory)
    write_dataset(ds, tags, directory)
    write_id_maps(ds, directory)
    order = np.lexsort((ds.items, ds.users))
    with open(directory / "split.tsv", "w", encoding="utf-8") as fh:
        fh.write("# user_index\titem_index\tsplit\n")
        fh.writelines(f"{ds.users[k]}\t{ds.items[k]}\t{SPLIT_NAMES[ds.split[k]]}\n" for k in order)
    return directory


def _read_map(path: Path) -> tuple[str, ...]:
    ids = []
    for lineno, line in _data_lines(path):
        idx, _, orig = line.partition("\t")
        if not idx.isdigit() or int(idx) != len(ids):
            raise DataError(f"{path}:{lineno}: expected consecutive index, got {idx!r}")
        ids.append(orig)
    return tuple(ids)


def load_prepared(directory) -> tuple[InteractionDataset, ItemTagMatrix]:
    """Inverse of :func:`save_prepared`."""
    directory = Path(directory)
    for name in ("split.tsv", "users.map", "items.map", "item_tags.tsv"):
        if not (directory / name).exists():
            raise DataError(f"{directory / name}: no such file (run prepare first)")
    user_ids = _read_map(directory / "users.map")
    item_ids = _read_map(directory / "items.map")
    rows = []
    for lineno, line in _data_lines(directory / "split.tsv"):
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in SPLIT_NAMES:
            raise DataError(f"{directory / 'split.tsv'}:{lineno}: malformed line {line!r}")
        rows.append((int(fields[0]), int(fields[1]), SPLIT_NAMES.index(fields[2])))
    if not rows:
        raise DataError(f"{directory / 'split.tsv'}: no interactions")
    arr = np.array(rows, dtype=np.int64)
    ds = InteractionDataset(len(user_ids), len(item_ids), arr[:, 0], arr[:, 1], user_ids, item_ids, arr[:, 2])
    tags = load_item_tags(directory / "item_tags.tsv", ds, min_tag_items=0)
    return ds, tags


def prepare_dataset(
    interactions_path,
    tags_path,
    kcore: int = 10,
    min_tag_items: int = 10,
    ratios=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[InteractionDataset, ItemTagMatrix]:
    """Load, k-core filter, attach tags and split in one call."""
    raw = load_interactions(interactions_path)
    ds = kcore_filter(raw, kcore)
    dropped = set(raw.item_ids) - set(ds.item_ids)
    tags = load_item_tags(tags_path, ds, min_tag_items=min_tag_items, dropped_items=dropped)
    return split_dataset(ds, ratios, seed), tags
