"""Global popularity, Jaccard similar-user sets and personal popularity.

Everything here reads the train split only.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse

from .data import InteractionDataset

_logger = logging.getLogger(__name__)

_CACHE_MAGIC = b"PPSU"
_CACHE_VERSION = 1


def compute_gp(ds: InteractionDataset) -> np.ndarray:
    """Fraction of users that interacted with each item in train."""
    if ds.size("train") == 0:
        raise ValueError("train split is empty")
    u, i = ds.pairs("train")
    distinct = np.unique(u * ds.num_items + i) % ds.num_items
    return np.bincount(distinct, minlength=ds.num_items) / ds.num_users


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


@dataclass
class SimilarUserIndex:
    """Top-k most similar users per user, as padded arrays.

    ``neighbors[u, :lengths[u]]`` are the neighbor ids ordered by similarity
    descending then id ascending; ``sims`` holds the matching Jaccard values.
    Padding slots hold -1 / 0.0.
    """

    k: int
    neighbors: np.ndarray
    sims: np.ndarray
    lengths: np.ndarray

    @property
    def num_users(self) -> int:
        return len(self.lengths)

    def neighbor_list(self, user: int) -> list[tuple[int, float]]:
        n = self.lengths[user]
        return list(zip(self.neighbors[user, :n].tolist(), self.sims[user, :n].tolist()))

    def __eq__(self, other):
        if not isinstance(other, SimilarUserIndex):
            return NotImplemented
        return (
            self.k == other.k
            and np.array_equal(self.lengths, other.lengths)
            and np.array_equal(self.neighbors, other.neighbors)
            and np.array_equal(self.sims, other.sims)
        )

    def weight_matrix(self) -> sparse.csr_matrix:
        """Row-normalized |U| x |U| neighbor matrix: row u has 1/|S_u| on each neighbor."""
        rows = np.repeat(np.arange(self.num_users), self.lengths)
        mask = self.neighbors >= 0
        cols = self.neighbors[mask]
        w = np.repeat(1.0 / np.maximum(self.lengths, 1), self.lengths)
        return sparse.csr_matrix((w, (rows, cols)), shape=(self.num_users, self.num_users))


def _effective_k(k: int, num_users: int) -> int:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k >= num_users:
        _logger.warning("k=%d >= num_users=%d; capping neighbor lists at %d", k, num_users, num_users - 1)
        k = max(num_users - 1, 0)
    return k


def _pack(rows: list[list[tuple[int, float]]], k: int) -> SimilarUserIndex:
    n = len(rows)
    neighbors = np.full((n, max(k, 0)), -1, dtype=np.int64)
    sims = np.zeros((n, max(k, 0)), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    for u, row in enumerate(rows):
        lengths[u] = len(row)
        for j, (v, s) in enumerate(row):
            neighbors[u, j] = v
            sims[u, j] = s
    return SimilarUserIndex(k, neighbors, sims, lengths)


def build_similar_user_index_bruteforce(ds: InteractionDataset, k: int) -> SimilarUserIndex:
    """O(|U|^2) reference: every pair, Python sets."""
    keff = _effective_k(k, ds.num_users)
    sets = [set(ds.user_items(u).tolist()) for u in range(ds.num_users)]
    rows = []
    for u in range(ds.num_users):
        cand = []
        for v in range(ds.num_users):
            if v == u:
                continue
            s = jaccard(sets[u], sets[v])
            if s > 0:
                cand.append((-s, v))
        cand.sort()
        rows.append([(v, -s) for s, v in cand[:keff]])
    return _pack(rows, keff)


def build_similar_user_index(ds: InteractionDataset, k: int = 30, chunk_size: int = 512) -> SimilarUserIndex:
    """Top-k Jaccard neighbors via the item->users inverted index.

    Intersection counts come from ``X[chunk] @ X.T`` over the binary
    incidence; only users sharing an item with the query appear in that
    product, so zero-similarity users are never candidates.
    """
    keff = _effective_k(k, ds.num_users)
    n = ds.num_users
    X = ds.incidence("train")
    X.data[:] = 1.0
    XT = X.T.tocsr()
    deg = np.asarray(X.sum(axis=1)).ravel()

    neighbors = np.full((n, keff), -1, dtype=np.int64)
    sims = np.zeros((n, keff), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    if keff == 0:
        return SimilarUserIndex(keff, neighbors, sims, lengths)

    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        inter = (X[start:stop] @ XT).tocsr()
        inter.sort_indices()
        for r in range(stop - start):
            u = start + r
            lo, hi = inter.indptr[r], inter.indptr[r + 1]
            cand = inter.indices[lo:hi]
            cnt = inter.data[lo:hi]
            keep = cand != u
            cand, cnt = cand[keep], cnt[keep]
            if len(cand) == 0:
                continue
            # counts are exact small integers, so equal ratios give equal doubles
            sim = cnt / (deg[u] + deg[cand] - cnt)
            if len(cand) > keff:
                # cheap prefilter: keep everything >= the k-th largest similarity
                kth = np.partition(sim, len(sim) - keff)[len(sim) - keff]
                sel = sim >= kth
                cand, sim = cand[sel], sim[sel]
            order = np.lexsort((cand, -sim))[:keff]
            m = len(order)
            neighbors[u, :m] = cand[order]
            sims[u, :m] = sim[order]
            lengths[u] = m
    return SimilarUserIndex(keff, neighbors, sims, lengths)


class PersonalPopularity:
    """On-demand p_{u,i} lookups backed by a similar-user index.

    ``p_{u,i}`` is the fraction of u's stored neighbors with i in their train
    set; an empty neighbor list gives 0 everywhere.
    """

    def __init__(self, index: SimilarUserIndex, ds: InteractionDataset):
        if index.num_users != ds.num_users:
            raise ValueError("index and dataset disagree on the number of users")
        self.index = index
        self.ds = ds
        self._X = ds.incidence("train")
        self._W = index.weight_matrix()
        self._B = self._W.copy()
        self._B.data[:] = 1.0

    def values(self, users, items) -> np.ndarray:
        """Vectorised p for aligned ``users``/``items`` arrays."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        nb = self.index.neighbors[users]
        valid = nb >= 0
        hit = self.ds.in_train(np.where(valid, nb, 0), np.broadcast_to(items[:, None], nb.shape)) & valid
        lengths = self.index.lengths[users]
        return np.where(lengths > 0, hit.sum(axis=1) / np.maximum(lengths, 1), 0.0)

    def __call__(self, user: int, item: int) -> float:
        return float(self.values(np.array([user]), np.array([item]))[0])

    def rows(self, users) -> np.ndarray:
        """Dense ``len(users) x num_items`` block of p values."""
        users = np.asarray(users, dtype=np.int64)
        counts = np.asarray((self._B[users] @ self._X).todense())
        lengths = self.index.lengths[users]
        return np.where(lengths[:, None] > 0, counts / np.maximum(lengths, 1)[:, None], 0.0)

    def item_means(self) -> np.ndarray:
        """Mean p over all users, per item."""
        w = np.asarray(self._W.sum(axis=0)).ravel()
        return np.asarray(self._X.T @ w).ravel() / self.ds.num_users


def personal_popularity(index: SimilarUserIndex, ds: InteractionDataset, user: int, item: int) -> float:
    n = index.lengths[user]
    if n == 0:
        return 0.0
    nb = index.neighbors[user, :n]
    return float(ds.in_train(nb, np.full(n, item)).sum() / n)


def _top_items(scores: np.ndarray, exclude: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest scores, ties by ascending index, skipping ``exclude``."""
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    mask = np.ones(len(scores), dtype=bool)
    mask[exclude] = False
    cand = np.flatnonzero(mask)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:n]]


def pp_top_items(index: SimilarUserIndex, ds: InteractionDataset, user: int, n: int,
                 pp: PersonalPopularity | None = None) -> list[int]:
    pp = pp or PersonalPopularity(index, ds)
    row = pp.rows([user])[0]
    return _top_items(row, ds.user_items(user), n).tolist()


# -- binary cache ------------------------------------------------------------

def save_index(index: SimilarUserIndex, path: str | Path, dataset_hash: str) -> None:
    """Header, dataset hash, then per user a u32 length and (u32 id, f32 sim) pairs."""
    h = dataset_hash.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(struct.pack("<III", _CACHE_VERSION, index.num_users, index.k))
        fh.write(struct.pack("<I", len(h)) + h)
        pair = np.dtype([("id", "<u4"), ("sim", "<f4")])
        for u in range(index.num_users):
            n = int(index.lengths[u])
            fh.write(struct.pack("<I", n))
            rec = np.empty(n, dtype=pair)
            rec["id"] = index.neighbors[u, :n]
            rec["sim"] = index.sims[u, :n]
            fh.write(rec.tobytes())


def load_index(path: str | Path, dataset_hash: str | None = None) -> SimilarUserIndex | None:
    """Read a cached index; returns None when the file is stale or absent.

    Similarities come back at f32 precision.
    """
    path = Path(path)
    if not path.exists():
        return None
    buf = path.read_bytes()
    if buf[:4] != _CACHE_MAGIC:
        raise ValueError(f"{path}: not a similar-user cache")
    version, n, k = struct.unpack_from("<III", buf, 4)
    if version != _CACHE_VERSION:
        return None
    (hlen,) = struct.unpack_from("<I", buf, 16)
    stored = buf[20:20 + hlen].decode("ascii")
    if dataset_hash is not None and stored != dataset_hash:
        _logger.info("similar-user cache %s is stale; rebuilding", path)
        return None
    off = 20 + hlen
    pair = np.dtype([("id", "<u4"), ("sim", "<f4")])
    neighbors = np.full((n, k), -1, dtype=np.int64)
    sims = np.zeros((n, k), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    for u in range(n):
        (m,) = struct.unpack_from("<I", buf, off)
        off += 4
        rec = np.frombuffer(buf, dtype=pair, count=m, offset=off)
        off += m * pair.itemsize
        neighbors[u, :m] = rec["id"]
        sims[u, :m] = rec["sim"]
        lengths[u] = m
    return SimilarUserIndex(k, neighbors, sims, lengths)


def load_or_build_index(ds: InteractionDataset, k: int, path: str | Path | None = None) -> SimilarUserIndex:
    h = ds.content_hash()
    if path is not None:
        cached = load_index(path, h)
        if cached is not None and cached.k == _effective_k(k, ds.num_users):
            return cached
    index = build_similar_user_index(ds, k)
    if path is not None:
        save_index(index, path, h)
    return index


@dataclass
class PopularityIndex:
    """Observed popularity for one training split: ``gp`` per item and ``pp`` lookups."""

    gp: np.ndarray
    index: SimilarUserIndex
    pp: PersonalPopularity

    @property
    def k(self) -> int:
        return self.index.k


def build_popularity(ds: InteractionDataset, k: int = 30, cache: str | Path | None = None) -> PopularityIndex:
    index = load_or_build_index(ds, k, cache)
    return PopularityIndex(compute_gp(ds), index, PersonalPopularity(index, ds))
