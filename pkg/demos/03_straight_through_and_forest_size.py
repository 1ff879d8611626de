"""Two mechanics behind the model: the hard Top-K mask and the forest.

The forward pass keeps exactly K clusters per row, yet gradients still
reach every score because the backward pass uses a tempered softmax.

The forest sums independently seeded models.  The loop below is the same
forest-size sweep the acceptance suite runs on MovieLens; on this small
synthetic catalogue one model is already near the ceiling, so the
differences between forest sizes are noise.

Run with ``python3 demos/03_straight_through_and_forest_size.py``.
"""
import numpy as np

from ecf import tensor as T
from ecf.data import TEST, split_dataset, synthetic_dataset
from ecf.ranking import evaluate_ranking
from ecf.trainer import Forest, TrainConfig, train_forest

# %% Forward: a hard mask.  Backward: the softmax gradient.
scores = T.Tensor(np.array([[0.9, -0.2, 0.1, 0.4]]), requires_grad=True)
with T.Tape() as tape:
    mask = T.straight_through_topk(scores, 2, temperature=2.0)
    out = T.tsum(mask * np.array([[1.0, 2.0, 3.0, 4.0]]))
tape.backward(out)
print("mask     ", mask.data)
print("gradient ", np.round(scores.grad, 4))

# %% Forest size: the first F members of one forest are an F-member forest.
# A taste group here is about 20 items, so @20 saturates; @10 is the
# informative cut-off on this catalogue.
ds, tags = synthetic_dataset(num_users=200, num_items=120, num_groups=6, interactions_per_user=15, seed=2)
ds = split_dataset(ds, seed=0)
config = TrainConfig(num_clusters=16, dim=16, item_topk=4, user_topk=4, lr=1e-2, batch_size=256, epochs_max=30, patience=5)
forest = train_forest(ds, tags, config, F=5)
for F in (1, 3, 5):
    sub = Forest(forest.members[:F], forest.hyperparams)
    result = evaluate_ranking(sub.scores, ds, TEST, ks=(10,))
    print(f"F={F}: test recall@10 {result['recall@10']:.4f}, ndcg@10 {result['ndcg@10']:.4f}")
