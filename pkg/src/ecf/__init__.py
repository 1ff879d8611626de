"""Explainable collaborative filtering with taste clusters.

Users and items are mapped to a few learned taste clusters, each described
by a handful of tags; a recommendation score is the sum of the user's and
the item's shared cluster affiliations, which doubles as its explanation.
"""
from .data import (
    InteractionDataset,
    ItemTagMatrix,
    compute_idf,
    kcore_filter,
    load_interactions,
    load_item_tags,
    load_prepared,
    prepare_dataset,
    sample_bpr_triplets,
    save_prepared,
    split_dataset,
    synthetic_dataset,
)
from .explain import Explanation, explain, recommend_clusters, recommend_topk, render_template, tag_discovery
from .model import EcfHyperParams, EcfModel, SparseAffiliations, TasteCluster, TasteClusterSet
from .ranking import evaluate_ranking, ndcg_at_k, recall_at_k
from .trainer import (
    EcfMember,
    Forest,
    MfForest,
    MfModel,
    TrainConfig,
    load_model,
    save_model,
    train_forest,
    train_mf,
    train_mf_forest,
    train_single,
)

__version__ = "0.1.0"
