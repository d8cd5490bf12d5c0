"""Interaction logs: loading, ID mapping, intervened splits and negative sampling."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

_logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
_DELIMITERS = {"tsv": "\t", "csv": ",", "movielens-dat": "::"}


class DataError(ValueError):
    """Raised for malformed or unusable interaction data."""


class RawInteraction(NamedTuple):
    user: str
    item: str
    rating: int | None = None
    timestamp: int | None = None


class TrainingTriple(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


def load_dataset(path: str | Path, format: str = "tsv") -> list[RawInteraction]:
    """Parse a delimited interaction file into raw interactions, in file order.

    Each line holds ``user, item[, rating[, timestamp]]``.  Blank lines and
    lines starting with ``#`` are skipped.
    """
    if format not in _DELIMITERS:
        raise DataError(f"unknown format {format!r}; expected one of {sorted(_DELIMITERS)}")
    delim = _DELIMITERS[format]
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"interaction file not found: {path}")

    rows: list[RawInteraction] = []
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split(delim)
            if len(parts) < 2 or len(parts) > 4 or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}: line {lineno}: expected user{delim}item[...], got {line!r}")
            try:
                rating = int(float(parts[2])) if len(parts) > 2 and parts[2].strip() else None
                ts = int(parts[3]) if len(parts) > 3 and parts[3].strip() else None
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            rows.append(RawInteraction(parts[0].strip(), parts[1].strip(), rating, ts))
    if not rows:
        raise DataError(f"{path}: empty dataset")
    return rows


@dataclass
class InteractionDataset:
    """Dense-ID implicit feedback with train/valid/test splits.

    Each split is a pair of parallel int arrays ``(users, items)``.  Per-user
    item sets are exposed through CSR-style views (:meth:`user_items`).
    """

    num_users: int
    num_items: int
    users: dict[str, np.ndarray]
    items: dict[str, np.ndarray]
    ratings: dict[str, np.ndarray | None] = field(default_factory=dict)
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._csr: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for s in SPLITS:
            self.users.setdefault(s, np.zeros(0, dtype=np.int64))
            self.items.setdefault(s, np.zeros(0, dtype=np.int64))
            self.ratings.setdefault(s, None)

    def size(self, split: str = "train") -> int:
        return len(self.users[split])

    def pairs(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        return self.users[split], self.items[split]

    def _view(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        if split not in self._csr:
            u, i = self.users[split], self.items[split]
            order = np.lexsort((i, u))
            indptr = np.zeros(self.num_users + 1, dtype=np.int64)
            np.cumsum(np.bincount(u, minlength=self.num_users), out=indptr[1:])
            self._csr[split] = (indptr, i[order].astype(np.int64))
        return self._csr[split]

    def user_items(self, user: int, split: str = "train") -> np.ndarray:
        """Sorted item ids of ``user`` in ``split``."""
        indptr, idx = self._view(split)
        return idx[indptr[user]:indptr[user + 1]]

    def user_degree(self, split: str = "train") -> np.ndarray:
        indptr, _ = self._view(split)
        return np.diff(indptr)

    def item_counts(self, split: str = "train") -> np.ndarray:
        return np.bincount(self.items[split], minlength=self.num_items)

    def csr(self, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
        """``(indptr, indices)`` of the user x item incidence for ``split``."""
        return self._view(split)

    def incidence(self, split: str = "train"):
        """Binary user x item ``scipy.sparse.csr_matrix`` for ``split``."""
        from scipy import sparse

        indptr, idx = self._view(split)
        data = np.ones(len(idx), dtype=np.float64)
        return sparse.csr_matrix((data, idx, indptr), shape=(self.num_users, self.num_items))

    def train_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys of the train split, for membership tests."""
        if "_keys" not in self._csr:
            keys = np.sort(self.users["train"] * self.num_items + self.items["train"])
            self._csr["_keys"] = (keys, keys)
        return self._csr["_keys"][0]

    def in_train(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = self.train_keys()
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, len(keys) - 1) if len(keys) else pos
        return (keys[pos] == q) if len(keys) else np.zeros(q.shape, dtype=bool)

    def content_hash(self) -> str:
        """SHA-256 over the split arrays; stable across runs and machines."""
        h = hashlib.sha256()
        h.update(np.array([self.num_users, self.num_items], dtype="<i8").tobytes())
        for s in SPLITS:
            h.update(s.encode())
            h.update(self.users[s].astype("<i8").tobytes())
            h.update(self.items[s].astype("<i8").tobytes())
        return h.hexdigest()


def build_dataset(raw: Sequence[RawInteraction]) -> InteractionDataset:
    """Map raw IDs to dense ids (first-appearance order) and collapse duplicates.

    Everything lands in the train split; duplicates keep the max rating.
    """
    if not raw:
        raise DataError("cannot build a dataset from an empty interaction list")
    umap: dict[str, int] = {}
    imap: dict[str, int] = {}
    best: dict[tuple[int, int], int | None] = {}
    has_rating = True
    for r in raw:
        u = umap.setdefault(r.user, len(umap))
        i = imap.setdefault(r.item, len(imap))
        key = (u, i)
        if r.rating is None:
            has_rating = False
        if key in best:
            prev = best[key]
            if r.rating is not None and (prev is None or r.rating > prev):
                best[key] = r.rating
        else:
            best[key] = r.rating
    keys = list(best)
    users = np.fromiter((k[0] for k in keys), dtype=np.int64, count=len(keys))
    items = np.fromiter((k[1] for k in keys), dtype=np.int64, count=len(keys))
    ratings = None
    if has_rating:
        ratings = np.fromiter((best[k] for k in keys), dtype=np.int64, count=len(keys))
    return InteractionDataset(
        num_users=len(umap),
        num_items=len(imap),
        users={"train": users},
        items={"train": items},
        ratings={"train": ratings},
        user_ids=list(umap),
        item_ids=list(imap),
    )


def _balanced_draw(
    item_of: np.ndarray, available: np.ndarray, target: int, num_items: int, rng: np.random.Generator
) -> tuple[np.ndarray, int, list[str]]:
    """Pick ``target`` positions from ``available`` so items get near-equal counts.

    Returns the chosen positions (indices into ``item_of``), the equal quota,
    and any warnings.
    """
    avail_items = item_of[available]
    counts = np.bincount(avail_items, minlength=num_items)
    quota = target // num_items
    take = np.minimum(counts, quota)
    short = target - int(take.sum())
    # round-robin top-up over items that still have surplus, random item order
    order = rng.permutation(num_items)
    while short > 0:
        surplus = order[take[order] < counts[order]]
        if len(surplus) == 0:
            break
        step = surplus[:short]
        take[step] += 1
        short -= len(step)
    warnings = []
    if short > 0:
        warnings.append(f"target {target} unreachable; attained {target - short}")

    # group available positions by item, shuffle within item, keep the first take[i]
    perm = available[rng.permutation(len(available))]
    grouped = perm[np.argsort(item_of[perm], kind="stable")]
    starts = np.zeros(num_items + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    rank_in_item = np.arange(len(grouped)) - starts[item_of[grouped]]
    chosen = grouped[rank_in_item < take[item_of[grouped]]]
    return np.sort(chosen), quota, warnings


def intervened_split(
    ds: InteractionDataset, test_frac: float = 0.1, valid_frac: float = 0.1, seed: int = 0
) -> InteractionDataset:
    """Split so that test and validation interactions are spread evenly over items.

    Every item contributes ``floor(target / num_items)`` interactions; items
    with fewer give all they have and the shortfall goes round-robin to items
    with interactions left.  Validation is drawn the same way from the rest.
    All current interactions (of every split) form the pool.
    """
    if not (test_frac > 0 and valid_frac > 0 and test_frac + valid_frac < 1):
        raise ValueError(f"need 0 < test_frac, valid_frac and sum < 1; got {test_frac}, {valid_frac}")
    users = np.concatenate([ds.users[s] for s in SPLITS])
    items = np.concatenate([ds.items[s] for s in SPLITS])
    rated = all(ds.ratings[s] is not None or ds.size(s) == 0 for s in SPLITS)
    ratings = np.concatenate([ds.ratings[s] for s in SPLITS if ds.size(s)]) if rated else None
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    if ratings is not None:
        ratings = ratings[order]
    n = len(users)

    rng = np.random.default_rng(seed)
    all_pos = np.arange(n)
    test_target = int(round(test_frac * n))
    valid_target = int(round(valid_frac * n))
    test_pos, test_q, warn = _balanced_draw(items, all_pos, test_target, ds.num_items, rng)
    rest = np.setdiff1d(all_pos, test_pos, assume_unique=True)
    valid_pos, valid_q, warn2 = _balanced_draw(items, rest, valid_target, ds.num_items, rng)
    train_pos = np.setdiff1d(rest, valid_pos, assume_unique=True)
    for w in warn + warn2:
        _logger.warning("intervened split: %s", w)

    parts = {"train": train_pos, "valid": valid_pos, "test": test_pos}
    out = InteractionDataset(
        num_users=ds.num_users,
        num_items=ds.num_items,
        users={s: users[p] for s, p in parts.items()},
        items={s: items[p] for s, p in parts.items()},
        ratings={s: (ratings[p] if ratings is not None else None) for s, p in parts.items()},
        user_ids=list(ds.user_ids),
        item_ids=list(ds.item_ids),
        meta={
            "seed": seed,
            "test_frac": test_frac,
            "valid_frac": valid_frac,
            "counts": {s: int(len(p)) for s, p in parts.items()},
            "quota": {"test": test_q, "valid": valid_q},
            "warnings": warn + warn2,
        },
    )
    return out


def sample_negatives(
    ds: InteractionDataset,
    users: np.ndarray,
    pos_items: np.ndarray,
    seed: int | np.random.Generator = 0,
) -> np.ndarray:
    """Draw one uniform non-train item per positive, by rejection.

    Returns the negative item array aligned with ``users``; use
    :func:`as_triples` for the record view.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    users = np.asarray(users, dtype=np.int64)
    deg = ds.user_degree("train")
    full = np.flatnonzero(deg[np.unique(users)] >= ds.num_items) if len(users) else []
    if len(full):
        bad = np.unique(users)[full[0]]
        raise DataError(f"user {bad} has interacted with every item; no negative exists")
    neg = rng.integers(0, ds.num_items, size=len(users))
    bad = ds.in_train(users, neg)
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, ds.num_items, size=len(idx))
        bad[idx] = ds.in_train(users[idx], neg[idx])
    return neg


def as_triples(users, pos_items, neg_items) -> list[TrainingTriple]:
    return [TrainingTriple(int(u), int(p), int(n)) for u, p, n in zip(users, pos_items, neg_items)]


# split manifest: one comment line of JSON metadata, then user/item/split rows

def write_split_manifest(ds: InteractionDataset, path: str | Path) -> None:
    meta = dict(ds.meta)
    meta.update(num_users=ds.num_users, num_items=ds.num_items, dataset_hash=ds.content_hash())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write("user\titem\tsplit\traw_user\traw_item\trating\n")
        for s in SPLITS:
            r = ds.ratings[s]
            for j, (u, i) in enumerate(zip(ds.users[s].tolist(), ds.items[s].tolist())):
                rating = "" if r is None else str(int(r[j]))
                fh.write(f"{u}\t{i}\t{s}\t{ds.user_ids[u]}\t{ds.item_ids[i]}\t{rating}\n")


def read_split_manifest(path: str | Path) -> InteractionDataset:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing metadata header")
        meta = json.loads(first[2:])
        fh.readline()
        cols: dict[str, list] = {s: [] for s in SPLITS}
        user_ids = [""] * meta["num_users"]
        item_ids = [""] * meta["num_items"]
        for lineno, line in enumerate(fh, start=3):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 6 or parts[2] not in cols:
                raise DataError(f"{path}: line {lineno}: malformed manifest row")
            u, i = int(parts[0]), int(parts[1])
            user_ids[u], item_ids[i] = parts[3], parts[4]
            cols[parts[2]].append((u, i, int(parts[5]) if parts[5] else None))
    users, items, ratings = {}, {}, {}
    for s, rows in cols.items():
        users[s] = np.array([r[0] for r in rows], dtype=np.int64)
        items[s] = np.array([r[1] for r in rows], dtype=np.int64)
        rs = [r[2] for r in rows]
        ratings[s] = np.array(rs, dtype=np.int64) if rs and None not in rs else None
    expected = meta.pop("dataset_hash", None)
    meta.pop("num_users"), meta.pop("num_items")
    ds = InteractionDataset(
        num_users=len(user_ids), num_items=len(item_ids), users=users, items=items,
        ratings=ratings, user_ids=user_ids, item_ids=item_ids, meta=meta,
    )
    if expected is not None and ds.content_hash() != expected:
        raise DataError(f"{path}: manifest content does not match its recorded hash")
    return ds
