"""Score learned taste clusters against three simple clusterings.

The baselines are tag clusters (items sharing a seed item's tags), k-means
on matrix-factorisation item vectors, and random groups.  Each set gets the
same four scores; ``Overall`` sums each score's gain over the random
clustering, so the random row is 0 by construction.

Run with ``python3 demos/02_explainability_report.py``.
"""
from ecf.cli import explainability_table
from ecf.data import split_dataset, synthetic_dataset
from ecf.metrics import format_report_table
from ecf.trainer import TrainConfig, train_mf, train_single

ds, tags = synthetic_dataset(num_users=200, num_items=120, num_groups=6, interactions_per_user=15, seed=1)
ds = split_dataset(ds, seed=0)
config = TrainConfig(num_clusters=16, dim=16, item_topk=4, user_topk=4, lr=1e-2, batch_size=256, epochs_max=30, patience=5)

# %% One ECF model supplies the clusters; an MF model supplies the reference item vectors
member = train_single(ds, tags, config)
mf = train_mf(ds, config)
print(f"{len(member.clusters)} clusters, mean size {member.clusters.mean_size():.1f}")
for cluster in list(member.clusters)[:4]:
    print(f"  cluster {cluster.cluster_id}: {cluster.size} items, tags {member.clusters.tag_labels(cluster)}")

# %% The report, in the column order Cov., Util., Sil., Info., Overall
reports = explainability_table(member.clusters, tags, mf.item_emb, seed=0, size_threshold=5)
print()
print(format_report_table(reports))
