# %% [markdown]
# # Where the recommendations go
#
# Head items (top 10% by training count) soak up most slots of a plain
# collaborative filter.  Here we count how often each group is recommended,
# and how well each group is recalled, before and after the popularity-aware
# scoring.

# %%
from ppac.data import build_dataset, intervened_split
from ppac.engine import InferenceConfig, TrainConfig, rank_baseline, rank_users, train, variant_heads
from ppac.evaluate import count_groups, ground_truth, group_frequency_recall, head_tail_groups, pp_gp_overlap
from ppac.models import init_bundle
from ppac.popularity import build_popularity
from ppac.synthetic import community_interactions

ds = intervened_split(build_dataset(community_interactions(seed=0)), 0.1, 0.1, seed=0)
pop = build_popularity(ds, k=30)
gt = ground_truth(ds, "test")
users = sorted(gt)

# %% [markdown]
# Personal popularity differs from the global kind: most users' top-50 PP list
# shares little with the global top-50.

# %%
overlap = pp_gp_overlap(pop, ds, n=50)
for row in overlap["histogram"]:
    print(f"  items outside global top-50: {row['bucket']:>6s}  users {row['users']}")

# %%
lists = {
    "MostPop": rank_baseline("mostpop", pop, ds, users, 50),
    "MostPPop": rank_baseline("mostppop", pop, ds, users, 50),
}
for variant in ("base", "full"):
    hp, hg = variant_heads(variant)
    b = init_bundle("bprmf", ds.num_users, ds.num_items, 64, seed=0, pp_head=hp, gp_head=hg)
    train(b, ds, pop, TrainConfig(variant=variant, epochs=40, batch_size=1024, patience=8, eval_every=2),
          InferenceConfig(k=50))
    lists[variant] = rank_users(b, pop, InferenceConfig(256.0, -128.0, 50), variant, ds, users)

# %%
head, head_names = head_tail_groups(ds, 0.1)
groups, names = count_groups(ds, [0, 10, 50, 100])
print(f"{'ranker':10s} {'head slots':>10s} " + " ".join(f"{'recall ' + n:>14s}" for n in names))
for name, l in lists.items():
    h = group_frequency_recall(l, gt, head, head_names, 50)[0]["rec_frequency"]
    rec = [r["recall"] for r in group_frequency_recall(l, gt, groups, names, 50)]
    print(f"{name:10s} {h:10d} " + " ".join(f"{x:14.4f}" for x in rec))
