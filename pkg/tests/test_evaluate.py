import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from conftest import I1, I2, I4, I5, U1
from ppac.data import RawInteraction, build_dataset
from ppac.engine import rank_baseline
from ppac.evaluate import (
    EvalReport,
    UnsupportedAnalysis,
    average_ranks,
    count_groups,
    ground_truth,
    group_frequency_recall,
    head_tail_groups,
    ndcg_at_k,
    pp_gp_overlap,
    pru_ppru,
    ranking_metrics,
    rating_vs_pp_rank,
    recall_at_k,
    spearman,
)
from ppac.popularity import build_popularity

# -- reference implementations --------------------------------------------------


def ref_recall(rec, gt, k):
    hits = 0
    for j in range(min(k, len(rec))):
        if rec[j] in gt:
            hits += 1
    return hits / len(gt)


def ref_ndcg(rec, gt, k):
    dcg = 0.0
    for j in range(min(k, len(rec))):
        if rec[j] in gt:
            dcg += 1.0 / math.log2(j + 2)
    idcg = 0.0
    for j in range(min(k, len(gt))):
        idcg += 1.0 / math.log2(j + 2)
    return dcg / idcg


def ref_ranks(x):
    idx = sorted(range(len(x)), key=lambda j: x[j])
    ranks = [0.0] * len(x)
    j = 0
    while j < len(idx):
        e = j
        while e + 1 < len(idx) and x[idx[e + 1]] == x[idx[j]]:
            e += 1
        avg = (j + e) / 2 + 1
        for t in range(j, e + 1):
            ranks[idx[t]] = avg
        j = e + 1
    return ranks


def ref_spearman(x, y):
    rx, ry = ref_ranks(x), ref_ranks(y)
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    sxx = sum((a - mx) ** 2 for a in rx)
    syy = sum((b - my) ** 2 for b in ry)
    if sxx == 0 or syy == 0:
        return None
    return sxy / math.sqrt(sxx * syy)


# -- examples -------------------------------------------------------------------


def test_recall_examples():
    assert recall_at_k([I2, I5], {I1, I2}, 2) == 0.5
    assert recall_at_k([3, 1, 2], {1, 2}, 3) == 1.0
    assert recall_at_k([3, 4], {1, 2}, 2) == 0.0
    assert recall_at_k([1], set(), 1) is None


def test_ndcg_examples():
    assert ndcg_at_k([7, 1], {7}, 2) == 1.0
    assert math.isclose(ndcg_at_k([1, 7], {7}, 2), 1 / math.log2(3))
    assert math.isclose(ndcg_at_k([1, 7], {7}, 2), 0.6309, abs_tol=1e-4)
    assert ndcg_at_k([1, 2], {7}, 2) == 0.0


def test_spearman_examples():
    assert math.isclose(spearman([1, 2, 3], [10, 20, 30]), 1.0)
    assert math.isclose(spearman([1, 2, 3], [30, 20, 10]), -1.0)
    assert average_ranks([1, 1, 2]).tolist() == [1.5, 1.5, 3.0]
    # ranks [1.5, 1.5, 3] vs [1, 3, 2]: centered cross-product is exactly 0
    assert spearman([1, 1, 2], [3, 5, 4]) == 0.0
    assert abs(stats.spearmanr([1, 1, 2], [3, 5, 4]).statistic) < 1e-12
    assert math.isclose(spearman([1, 1, 2], [1, 2, 3]), math.sqrt(3) / 2)


def test_spearman_undefined():
    assert spearman([1], [2]) is None
    assert spearman([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(ValueError):
        spearman([1, 2], [1])


def test_metric_oracles_1000_instances():
    rng = np.random.default_rng(99)
    for _ in range(1000):
        n_items = int(rng.integers(2, 40))
        k = int(rng.integers(1, 25))
        rec = rng.permutation(n_items)[: int(rng.integers(1, n_items + 1))].tolist()
        gt = set(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False).tolist())
        assert abs(recall_at_k(rec, gt, k) - ref_recall(rec, gt, k)) <= 1e-9
        assert abs(ndcg_at_k(rec, gt, k) - ref_ndcg(rec, gt, k)) <= 1e-9
        m = int(rng.integers(2, 30))
        x = rng.integers(0, int(rng.integers(1, 8)), m).tolist()
        y = rng.integers(0, int(rng.integers(1, 8)), m).tolist()
        got, ref = spearman(x, y), ref_spearman(x, y)
        if ref is None:
            assert got is None
        else:
            assert abs(got - ref) <= 1e-9
            assert abs(got - stats.spearmanr(x, y).statistic) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=1, max_size=30, unique=True),
       st.sets(st.integers(0, 30), min_size=1), st.integers(1, 40))
def test_metric_bounds(rec, gt, k):
    assert 0 <= recall_at_k(rec, gt, k) <= 1
    assert 0 <= ndcg_at_k(rec, gt, k) <= 1 + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=20), st.randoms())
def test_spearman_bounds(x, rnd):
    y = list(x)
    rnd.shuffle(y)
    s = spearman(x, y)
    assert s is None or -1 - 1e-12 <= s <= 1 + 1e-12


# -- PRU / PPRU ------------------------------------------------------------------


class _Pop:
    def __init__(self, g, p):
        self.gp = np.asarray(g, dtype=float)
        self._p = np.asarray(p, dtype=float)
        self.pp = self

    def values(self, users, items):
        return self._p[np.asarray(users), np.asarray(items)]


def test_pru_popularity_ordered_lists_is_one():
    rng = np.random.default_rng(0)
    g = rng.permutation(50) / 50
    pop = _Pop(g, np.tile(g, (3, 1)))
    lists = {u: np.argsort(-g)[u:u + 10].tolist() for u in range(3)}
    out = pru_ppru(lists, pop, 10)
    assert math.isclose(out["pru"], 1.0) and math.isclose(out["ppru"], 1.0)
    assert out["pru_excluded"] == 0


def test_pru_null_near_zero():
    rng = np.random.default_rng(1)
    g = rng.random(500)
    pop = _Pop(g, rng.random((1000, 500)))
    lists = {u: rng.permutation(500)[:50].tolist() for u in range(1000)}
    out = pru_ppru(lists, pop, 50)
    assert abs(out["pru"]) < 0.1 and abs(out["ppru"]) < 0.1


def test_pru_excludes_constant_popularity():
    pop = _Pop([0.5, 0.5, 0.2], [[0.1, 0.1, 0.3], [0.2, 0.4, 0.1]])
    out = pru_ppru({0: [0, 1], 1: [0, 2]}, pop, 2)
    assert out["pru_excluded"] == 1 and out["ppru_excluded"] == 1
    assert out["pru"] == 1.0 and out["ppru"] == 1.0


def test_mostpop_pru_is_one_with_distinct_gp():
    # item j is seen by j + 1 users, so every GP value is distinct
    rows = [RawInteraction(f"u{v}", f"i{j}") for j in range(30) for v in range(j + 1)]
    rows += [RawInteraction(f"u{v}", "i30") for v in range(40, 75)]
    ds = build_dataset(rows)
    pop = build_popularity(ds, 5)
    lists = rank_baseline("mostpop", pop, ds, range(ds.num_users), 10)
    out = pru_ppru(lists, pop, 10)
    assert math.isclose(out["pru"], 1.0)
    assert out["pru_excluded"] == sum(1 for items in lists.values() if len(items) < 2)


# -- groups ---------------------------------------------------------------------


def test_head_tail_toy(toy_ds):
    labels, names = head_tail_groups(toy_ds, 0.1)
    assert names == ["head", "tail"]
    assert np.flatnonzero(labels == 0).tolist() == [I2]
    rows = group_frequency_recall({}, {}, labels, names, 5)
    assert rows[0]["item_share"] == 0.2


def test_single_group_recall_equals_overall(small_split):
    rng = np.random.default_rng(0)
    gt = ground_truth(small_split, "test")
    lists = {u: rng.permutation(small_split.num_items)[:20].tolist() for u in gt}
    rows = group_frequency_recall(lists, gt, np.zeros(small_split.num_items, int), ["all"], 20)
    assert math.isclose(rows[0]["recall"], ranking_metrics(lists, gt, 20)["recall"])
    assert rows[0]["item_share"] == 1.0


def test_group_frequency_counts():
    lists = {u: [3, u % 2] for u in range(100)}
    labels = np.array([0, 0, 1, 1])
    rows = group_frequency_recall(lists, {}, labels, ["a", "b"], 2)
    assert rows[1]["rec_frequency"] == 100
    assert sum(r["rec_frequency"] for r in rows) == 100 * 2


def test_count_groups_partition(small_split):
    rng = np.random.default_rng(2)
    labels, names = count_groups(small_split, [0, 2, 5, 10])
    assert names == ["0-2", "2-5", "5-10", "10+"]
    counts = small_split.item_counts()
    assert np.all((labels == 0) == (counts < 2))
    gt = ground_truth(small_split, "test")
    lists = {u: rng.permutation(small_split.num_items)[:15].tolist() for u in gt}
    rows = group_frequency_recall(lists, gt, labels, names, 15)
    assert math.isclose(sum(r["item_share"] for r in rows), 1.0)
    assert sum(r["rec_frequency"] for r in rows) == len(lists) * 15
    with pytest.raises(ValueError):
        count_groups(small_split, [5, 10])


# -- PP analyses ----------------------------------------------------------------


def test_overlap_toy(toy_ds, toy_pop):
    out = pp_gp_overlap(toy_pop, toy_ds, n=2)
    assert out["d_u"][U1] == 2


def test_overlap_extremes():
    class Fixed:
        def __init__(self, gp, rows):
            self.gp = np.asarray(gp, float)
            self._rows = np.asarray(rows, float)
            self.pp = self

        def rows(self, users):
            return self._rows[np.asarray(users)]

    ds = build_dataset([RawInteraction("u", "a"), RawInteraction("v", "b")] +
                       [RawInteraction("w", x) for x in "cdef"])
    # users u and v rank like GP; user w has both GP-top items in train
    gp = [0.0, 0.0, 0.9, 0.8, 0.1, 0.2]
    rows = [gp, gp, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]
    out = pp_gp_overlap(Fixed(gp, rows), ds, n=2, buckets=(0, 1, 2))
    assert out["d_u"][:2] == [0, 0]
    assert out["d_u"][2] == 2
    assert out["histogram"] == [{"bucket": "0-1", "users": 2}, {"bucket": "1-2", "users": 0},
                                {"bucket": "2+", "users": 1}]


def _rated(ds, rating_of_item):
    u, i = ds.pairs("train")
    raw = [RawInteraction(ds.user_ids[a], ds.item_ids[b], int(rating_of_item[b])) for a, b in zip(u.tolist(), i.tolist())]
    return build_dataset(raw)


def test_rating_equal_means_equal(small_split):
    ds = _rated(small_split, np.full(small_split.num_items, 4))
    rows = rating_vs_pp_rank(build_popularity(ds, 10), ds)
    assert len(rows) == 5
    assert {r["mean_rating"] for r in rows if r["items"]} == {4.0}


def test_rating_tracks_pp_order(small_split):
    base = _rated(small_split, np.ones(small_split.num_items))
    pop = build_popularity(base, 10)
    mean_pp = pop.pp.item_means()
    order = np.lexsort((np.arange(base.num_items), -mean_pp))
    rating = np.empty(base.num_items, int)
    for g, grp in enumerate(np.array_split(order, 5)):
        rating[grp] = 5 - g
    ds = _rated(base, rating)
    rows = rating_vs_pp_rank(build_popularity(ds, 10), ds)
    means = [r["mean_rating"] for r in rows]
    assert all(a > b for a, b in zip(means, means[1:]))


def test_rating_requires_ratings(toy_ds, toy_pop):
    with pytest.raises(UnsupportedAnalysis):
        rating_vs_pp_rank(toy_pop, toy_ds)


def test_ranking_metrics_skip_empty_gt():
    out = ranking_metrics({0: [1, 2], 1: [3]}, {0: {1}, 1: set()}, 2)
    assert out == {"recall": 1.0, "ndcg": 1.0, "num_users": 1}


def test_report_to_dict():
    r = EvalReport(0.5, 0.4, 0.1, 0.2, 50, 10)
    d = r.to_dict()
    assert d["recall_at_k"] == 0.5 and d["groups"] == {} and d["k"] == 50
