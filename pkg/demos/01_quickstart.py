# %% [markdown]
# # Quickstart
#
# Build a small synthetic log, split it, train the base BPR-MF model and the
# full personalized-popularity variant, and compare Recall@50.
# Runs in well under a minute on one CPU.

# %%
from ppac.data import build_dataset, intervened_split
from ppac.engine import InferenceConfig, TrainConfig, rank_users, train, variant_heads
from ppac.evaluate import ground_truth, ranking_metrics
from ppac.models import init_bundle
from ppac.popularity import build_popularity
from ppac.synthetic import community_interactions

raw = community_interactions(num_users=300, num_items=400, num_communities=8, mean_degree=30, seed=0)
ds = intervened_split(build_dataset(raw), test_frac=0.1, valid_frac=0.1, seed=0)
print(f"{ds.num_users} users, {ds.num_items} items, train/valid/test = "
      f"{ds.size('train')}/{ds.size('valid')}/{ds.size('test')}")

# %% [markdown]
# Popularity statistics come from the training split only: a global score per
# item and a personal score per (user, item) from the user's 30 most similar users.

# %%
pop = build_popularity(ds, k=30)
print("most popular item ids:", pop.gp.argsort()[::-1][:5].tolist())

# %%
gt = ground_truth(ds, "test")
users = sorted(gt)
results = {}
for variant in ("base", "full"):
    pp_head, gp_head = variant_heads(variant)
    bundle = init_bundle("bprmf", ds.num_users, ds.num_items, 64, seed=0, pp_head=pp_head, gp_head=gp_head)
    train(bundle, ds, pop, TrainConfig(variant=variant, epochs=30, batch_size=1024, patience=6, eval_every=2),
          InferenceConfig(k=50))
    lists = rank_users(bundle, pop, InferenceConfig(256.0, -128.0, 50), variant, ds, users)
    results[variant] = ranking_metrics(lists, gt, 50)

for variant, m in results.items():
    print(f"{variant:5s} Recall@50 {m['recall']:.4f}  NDCG@50 {m['ndcg']:.4f}")
