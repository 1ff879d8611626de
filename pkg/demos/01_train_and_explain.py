"""Train a small forest and read its recommendations as explanations.

The synthetic catalogue has a handful of taste groups, each with its own
tags, plus noise tags sprinkled over every item.  Every score the model
produces is a sum of cluster contributions, so the explanation printed for
a recommendation adds up to exactly the score that ranked it.

Run with ``python3 demos/01_train_and_explain.py``.
"""
import numpy as np

from ecf import explain, recommend_topk
from ecf.data import TEST, TRAIN, split_dataset, synthetic_dataset
from ecf.explain import recommend_clusters, tag_discovery
from ecf.ranking import evaluate_ranking
from ecf.trainer import TrainConfig, train_forest

# %% Data: 200 users, 120 items, 6 taste groups, split 80/10/10 per user
ds, tags = synthetic_dataset(num_users=200, num_items=120, num_groups=6, interactions_per_user=15, seed=0)
ds = split_dataset(ds, seed=0)
print(f"{ds.num_users} users, {ds.num_items} items, {ds.num_interactions} interactions, {tags.num_tags} tags")

# %% A forest of three models, each with 16 clusters of 4 items per item row
config = TrainConfig(num_clusters=16, dim=16, item_topk=4, user_topk=4, lr=1e-2, batch_size=256, epochs_max=30, patience=5)
forest = train_forest(ds, tags, config, F=3)
result = evaluate_ranking(forest.scores, ds, TEST, ks=(10, 20))
print("test", ", ".join(f"{k} {v:.4f}" for k, v in result.items()))

# %% Recommendations for one user, with their explanation paths
user = 0
train = ds.matrix(TRAIN)
print(f"\nuser {ds.user_ids[user]} has {train[user].nnz} training items")
for item, score in recommend_topk(forest, user, 3, exclude_train=train):
    expl = explain(forest, user, item)
    total = sum(p.weight for p in expl.paths)
    lines = expl.text.splitlines()
    print(f"\nitem {ds.item_ids[item]}  score {score:.4f}  (sum of {len(lines)} paths {total:.4f})")
    print("\n".join(lines[:3]))

# %% The clusters this user leans on most
print("\nstrongest clusters for the user:")
for member, cluster, a in recommend_clusters(forest, user, 3):
    names = ", ".join(forest.members[member].clusters.tag_labels(cluster))
    print(f"  member {member} cluster {cluster.cluster_id}: a={a:.3f}, {cluster.size} items, tags [{names}]")

# %% Tags an item might be missing, judged by the clusters it sits in
item = int(np.argmax(np.asarray(train.sum(axis=0)).ravel()))
own = [tags.tag_names[t] for t in tags.item_tags(item)]
print(f"\nitem {ds.item_ids[item]} carries {own}")
print("candidate tags:", tag_discovery(forest, item, 3, tags.item_tags(item)))
