"""Ranking metrics, popularity-rank correlations and bias analyses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import InteractionDataset
from .popularity import PopularityIndex, _top_items


class UnsupportedAnalysis(ValueError):
    pass


def recall_at_k(recommended: Sequence[int], ground_truth, k: int) -> float | None:
    """Fraction of ``ground_truth`` found in the first ``k`` recommendations.

    Returns None for an empty ground truth; such users are left out of means.
    """
    gt = set(ground_truth)
    if not gt:
        return None
    hits = sum(1 for i in list(recommended)[:k] if i in gt)
    return hits / len(gt)


def ndcg_at_k(recommended: Sequence[int], ground_truth, k: int) -> float | None:
    """Binary-relevance NDCG with a log2(rank + 1) discount; ideal list truncated at min(k, |gt|)."""
    gt = set(ground_truth)
    if not gt:
        return None
    dcg = sum(1.0 / math.log2(j + 2) for j, i in enumerate(list(recommended)[:k]) if i in gt)
    idcg = sum(1.0 / math.log2(j + 2) for j in range(min(k, len(gt))))
    return dcg / idcg


def average_ranks(x) -> np.ndarray:
    """1-based ranks, ties share the mean of the positions they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    # boundaries of runs of equal values
    edges = np.flatnonzero(np.diff(xs) != 0) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(x)]])
    for lo, hi in zip(starts, ends):
        ranks[order[lo:hi]] = (lo + hi + 1) / 2.0
    return ranks


def spearman(x, y) -> float | None:
    """Pearson correlation of the average-rank vectors; None when undefined."""
    if len(x) != len(y):
        raise ValueError("spearman: length mismatch")
    if len(x) < 2:
        return None
    rx, ry = average_ranks(x), average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    den = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if den == 0:
        return None
    return float(rx @ ry) / den


def _mean(values: Iterable[float | None]) -> tuple[float, int]:
    vals = [v for v in values if v is not None]
    return (float(np.mean(vals)) if vals else 0.0), len(vals)


def ground_truth(ds: InteractionDataset, split: str = "test") -> dict[int, set[int]]:
    u, i = ds.pairs(split)
    out: dict[int, set[int]] = {}
    for a, b in zip(u.tolist(), i.tolist()):
        out.setdefault(a, set()).add(b)
    return out


def ranking_metrics(topk: dict[int, Sequence[int]], gt: dict[int, set[int]], k: int) -> dict:
    """Mean Recall@k / NDCG@k over users with non-empty ground truth."""
    users = sorted(u for u in gt if gt[u])
    recall, n = _mean(recall_at_k(topk.get(u, []), gt[u], k) for u in users)
    ndcg, _ = _mean(ndcg_at_k(topk.get(u, []), gt[u], k) for u in users)
    return {"recall": recall, "ndcg": ndcg, "num_users": n}


def pru_ppru(topk: dict[int, Sequence[int]], popularity: PopularityIndex, k: int) -> dict:
    """Negated mean Spearman between popularity and list position over each top-k.

    Position 1 is the best slot, so a positive value means popular items sit
    near the top.  Users whose correlation is undefined are excluded and counted.
    """
    pru, ppru = [], []
    for u, items in topk.items():
        items = np.asarray(list(items)[:k], dtype=np.int64)
        if len(items) < 2:
            pru.append(None)
            ppru.append(None)
            continue
        pos = np.arange(1, len(items) + 1)
        g = spearman(popularity.gp[items], pos)
        p = spearman(popularity.pp.values(np.full(len(items), u), items), pos)
        pru.append(None if g is None else -g)
        ppru.append(None if p is None else -p)
    pru_mean, n_pru = _mean(pru)
    ppru_mean, n_ppru = _mean(ppru)
    return {
        "pru": pru_mean,
        "ppru": ppru_mean,
        "pru_users": n_pru,
        "ppru_users": n_ppru,
        "pru_excluded": len(pru) - n_pru,
        "ppru_excluded": len(ppru) - n_ppru,
    }


# -- item groups -------------------------------------------------------------

def head_tail_groups(ds: InteractionDataset, head_frac: float = 0.1) -> tuple[np.ndarray, list[str]]:
    """Label the top ``head_frac`` of items by train count as head (0), the rest tail (1)."""
    counts = ds.item_counts("train")
    n_head = max(1, math.ceil(head_frac * ds.num_items))
    order = np.lexsort((np.arange(ds.num_items), -counts))
    labels = np.ones(ds.num_items, dtype=np.int64)
    labels[order[:n_head]] = 0
    return labels, ["head", "tail"]


def count_groups(ds: InteractionDataset, edges: Sequence[int]) -> tuple[np.ndarray, list[str]]:
    """Group items by train count into ``[edges[j], edges[j+1])`` ranges; the last is open."""
    counts = ds.item_counts("train")
    edges = list(edges)
    labels = np.searchsorted(np.asarray(edges), counts, side="right") - 1
    if (labels < 0).any():
        raise ValueError("group edges must start at or below the smallest item count")
    names = [f"{lo}-{hi}" for lo, hi in zip(edges[:-1], edges[1:])] + [f"{edges[-1]}+"]
    return labels, names


def group_frequency_recall(topk: dict[int, Sequence[int]], gt: dict[int, set[int]], labels: np.ndarray,
                           names: list[str], k: int) -> list[dict]:
    """Per-group item share, recommendation frequency and recall.

    Group recall averages, over users with ground truth in the group, the
    share of those ground-truth items that made the user's top-k.
    """
    labels = np.asarray(labels)
    n_items = len(labels)
    freq = np.zeros(len(names), dtype=np.int64)
    for items in topk.values():
        np.add.at(freq, labels[np.asarray(list(items)[:k], dtype=np.int64)], 1)
    per_user: list[list[float]] = [[] for _ in names]
    for u, truth in gt.items():
        if not truth:
            continue
        top = set(list(topk.get(u, []))[:k])
        by_group: dict[int, list[int]] = {}
        for i in truth:
            by_group.setdefault(int(labels[i]), []).append(i)
        for gidx, its in by_group.items():
            per_user[gidx].append(sum(1 for i in its if i in top) / len(its))
    rows = []
    for gidx, name in enumerate(names):
        size = int((labels == gidx).sum())
        rows.append({
            "group": name,
            "item_share": size / n_items,
            "rec_frequency": int(freq[gidx]),
            "rec_frequency_per_item": float(freq[gidx] / size) if size else 0.0,
            "recall": float(np.mean(per_user[gidx])) if per_user[gidx] else 0.0,
            "recall_users": len(per_user[gidx]),
        })
    return rows


# -- PP analyses ------------------------------------------------------------------

def gp_top_items(popularity: PopularityIndex, n: int) -> np.ndarray:
    return _top_items(popularity.gp, np.zeros(0, dtype=np.int64), n)


def pp_gp_overlap(popularity: PopularityIndex, ds: InteractionDataset, n: int = 50,
                  buckets: Sequence[int] = (0, 10, 20, 30, 40, 50)) -> dict:
    """d_u = number of a user's top-n PP items outside the global top-n GP set.

    PP lists skip the user's own train items.  Returns per-user values and a
    histogram over ``[buckets[j], buckets[j+1])`` plus a final closed bucket.
    """
    gp_top = set(gp_top_items(popularity, n).tolist())
    d = np.zeros(ds.num_users, dtype=np.int64)
    for start in range(0, ds.num_users, 256):
        users = np.arange(start, min(start + 256, ds.num_users))
        rows = popularity.pp.rows(users)
        for r, u in enumerate(users):
            top = _top_items(rows[r], ds.user_items(u), n)
            d[u] = sum(1 for i in top.tolist() if i not in gp_top)
    edges = list(buckets)
    hist = []
    for j, lo in enumerate(edges):
        hi = edges[j + 1] if j + 1 < len(edges) else None
        mask = (d >= lo) & (d < hi) if hi is not None else (d >= lo)
        hist.append({"bucket": f"{lo}-{hi}" if hi is not None else f"{lo}+", "users": int(mask.sum())})
    return {"d_u": d.tolist(), "histogram": hist}


def rating_vs_pp_rank(popularity: PopularityIndex, ds: InteractionDataset, num_groups: int = 5) -> list[dict]:
    """Mean item rating per group of items sorted by mean PP (highest PP first)."""
    if any(ds.ratings[s] is None and ds.size(s) for s in ("train", "valid", "test")):
        raise UnsupportedAnalysis("dataset has no ratings")
    items = np.concatenate([ds.items[s] for s in ("train", "valid", "test")])
    ratings = np.concatenate([ds.ratings[s] for s in ("train", "valid", "test") if ds.size(s)])
    sums = np.bincount(items, weights=ratings, minlength=ds.num_items)
    cnt = np.bincount(items, minlength=ds.num_items)
    mean_pp = popularity.pp.item_means()
    order = np.lexsort((np.arange(ds.num_items), -mean_pp))
    rows = []
    for g, grp in enumerate(np.array_split(order, num_groups)):
        rated = grp[cnt[grp] > 0]
        item_means = sums[rated] / cnt[rated]
        rows.append({
            "group": g,
            "items": int(len(grp)),
            "mean_pp": float(mean_pp[grp].mean()) if len(grp) else 0.0,
            "mean_rating": float(item_means.mean()) if len(rated) else float("nan"),
        })
    return rows


@dataclass
class EvalReport:
    recall_at_k: float
    ndcg_at_k: float
    pru_at_k: float
    ppru_at_k: float
    k: int
    num_users: int
    pru_excluded: int = 0
    ppru_excluded: int = 0
    groups: dict[str, list[dict]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)
