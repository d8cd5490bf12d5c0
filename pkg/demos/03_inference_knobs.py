# %% [markdown]
# # Turning the two inference knobs
#
# At ranking time the factual score gets ``gamma * PP + beta * GP`` added.
# Raising gamma pushes personally popular items up (PPRU rises); raising beta
# does the same for globally popular ones (PRU rises).  The knobs need no
# retraining, so one model serves the whole sweep.

# %%
from ppac.data import build_dataset, intervened_split
from ppac.engine import InferenceConfig, TrainConfig, rank_users, train, variant_heads
from ppac.evaluate import ground_truth, pru_ppru, ranking_metrics
from ppac.models import init_bundle
from ppac.popularity import build_popularity
from ppac.synthetic import community_interactions

ds = intervened_split(build_dataset(community_interactions(num_users=400, num_items=500, seed=1)), 0.1, 0.1, seed=0)
pop = build_popularity(ds, k=30)
gt = ground_truth(ds, "test")
users = sorted(gt)
hp, hg = variant_heads("full")
bundle = init_bundle("bprmf", ds.num_users, ds.num_items, 64, seed=0, pp_head=hp, gp_head=hg)
train(bundle, ds, pop, TrainConfig(epochs=40, batch_size=1024, patience=8, eval_every=2), InferenceConfig(k=50))


def row(gamma, beta):
    lists = rank_users(bundle, pop, InferenceConfig(gamma, beta, 50), "full", ds, users)
    m, c = ranking_metrics(lists, gt, 50), pru_ppru(lists, pop, 50)
    print(f"gamma {gamma:7.0f} beta {beta:7.0f}  recall {m['recall']:.4f}  PRU {c['pru']:+.3f}  PPRU {c['ppru']:+.3f}")


# %%
for g in (0, 64, 256, 1024):
    row(g, 0)
print()
for b in (-512, -128, 0, 64, 256, 1024):
    row(0, b)
