import itertools
import logging

import numpy as np
import pytest

from ecf.metrics import (
    COLUMN_LABELS,
    ExplainabilityReport,
    TagDiscriminator,
    _cross_entropy,
    coverage,
    explainability_report,
    format_report_table,
    informativeness,
    ndcg_at_k,
    overall,
    recall_at_k,
    silhouette,
    train_discriminator,
    utilization,
)
from ecf.model import TasteCluster, TasteClusterSet
from fdcheck import numeric_grad, rel_err, tape_grads

# Last-FM rows of the published explainability table
LASTFM = {
    "ECF": ((0.7648, 0.6259, 0.1584, 0.2996), 1.5352),
    "TagCluster": ((0.9880, 0.3703, -0.2511, 0.1206), 0.9143),
    "K-means": ((0.5667, 0.4841, 0.3197, 0.0182), 1.0752),
    "Random": ((0.5385, 0.2275, -0.4673, 0.0148), 0.0),
}


def clusters_of(groups, tag_sets=None, num_items=None, num_tags=18):
    tag_sets = tag_sets or [()] * len(groups)
    num_items = num_items or max((max(g) for g in groups if g), default=-1) + 1
    return TasteClusterSet(
        tuple(TasteCluster(c, tuple(g), tuple(t), (1.0,) * len(t)) for c, (g, t) in enumerate(zip(groups, tag_sets))),
        tuple(f"t{k}" for k in range(num_tags)),
        num_items,
    )


class StubDiscriminator:
    def __init__(self, proba):
        self.proba = proba

    def predict_proba(self, x):
        return self.proba[: len(x)]


def cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else a @ b / (na * nb)


def silhouette_oracle(groups, emb):
    """Pairwise-loop cosine-distance silhouette."""
    groups = [g for g in groups if g]
    Z = len(groups)
    total = 0.0
    for c1 in range(Z):
        g1 = groups[c1]
        if len(g1) == 1:
            a = 1.0
        else:
            a = np.mean([cos(emb[i], emb[j]) for i in g1 for j in g1 if i != j])
        for c2 in range(Z):
            if c1 == c2:
                continue
            left = [i for i in g1 if i not in groups[c2]]
            right = [j for j in groups[c2] if j not in g1]
            if not left or not right:
                continue
            b = np.mean([cos(emb[i], emb[j]) for i in left for j in right])
            da, db = 1 - a, 1 - b
            if max(da, db) > 1e-12:
                total += (db - da) / max(da, db)
    return total / Z**2


class TestRankingMetrics:
    def test_perfect_ranking(self):
        assert recall_at_k([3, 1, 2], [3, 1], 2) == 1.0
        assert ndcg_at_k([3, 1, 2], [3, 1], 2) == 1.0

    def test_hit_at_rank_two(self):
        assert recall_at_k([5, 7], [7], 2) == 1.0
        assert round(ndcg_at_k([5, 7], [7], 2), 4) == 0.6309
        assert abs(ndcg_at_k([5, 7], [7], 2) - 1 / np.log2(3)) <= 1e-12

    def test_empty_truth(self):
        with pytest.raises(ValueError):
            recall_at_k([1], [], 1)

    def test_exhaustive_four_item_oracle(self):
        items = range(4)
        for truth_size in range(1, 5):
            for truth in itertools.combinations(items, truth_size):
                for perm in itertools.permutations(items):
                    for k in range(1, 5):
                        rel = [1.0 if i in truth else 0.0 for i in perm[:k]]
                        want_r = sum(rel) / len(truth)
                        dcg = sum(r / np.log2(p + 2) for p, r in enumerate(rel))
                        idcg = sum(1 / np.log2(p + 2) for p in range(min(k, len(truth))))
                        assert abs(recall_at_k(perm, truth, k) - want_r) <= 1e-12
                        assert abs(ndcg_at_k(perm, truth, k) - dcg / idcg) <= 1e-12

    def test_promoting_a_truth_item_never_hurts(self, rng):
        for _ in range(200):
            ranked = list(rng.permutation(10))
            truth = set(rng.choice(10, 3, replace=False).tolist())
            pick = rng.choice(sorted(truth))
            promoted = [pick] + [i for i in ranked if i != pick]
            for k in (1, 3, 5):
                assert recall_at_k(promoted, truth, k) >= recall_at_k(ranked, truth, k)
                assert ndcg_at_k(promoted, truth, k) >= ndcg_at_k(ranked, truth, k) - 1e-12


class TestCoverageUtilization:
    def test_full_coverage(self):
        E = np.eye(3, 18)
        assert coverage(clusters_of([[0, 1, 2]], [[0, 1, 2]]), E) == 1.0

    def test_zero_coverage(self):
        E = np.eye(3, 18)
        assert coverage(clusters_of([[0, 1, 2]], [[5]]), E) == 0.0

    def test_three_of_four(self):
        E = np.zeros((4, 18))
        E[[0, 1, 2], 0] = 1
        E[3, 1] = 1
        assert coverage(clusters_of([[0, 1, 2, 3]], [[0]]), E) == 0.75

    def test_empty_clusters_skipped(self, caplog):
        E = np.eye(2, 18)
        with caplog.at_level(logging.WARNING):
            assert coverage(clusters_of([[0], []], [[0], [1]]), E) == 1.0
        assert "empty" in caplog.text

    def test_shared_tag_set(self):
        sets = [[0, 1, 2, 3]] * 5
        assert abs(utilization(clusters_of([[0]] * 5, sets), 18) - 4 / 18) <= 1e-12
        assert round(utilization(clusters_of([[0]] * 5, sets), 18), 4) == 0.2222

    def test_disjoint_sets(self):
        assert utilization(clusters_of([[0], [1]], [[0, 1, 2, 3], [4, 5, 6, 7]]), 18) == 8 / 18

    def test_every_tag_used(self):
        assert utilization(clusters_of([[0], [1]], [range(9), range(9, 18)]), 18) == 1.0


class TestSilhouette:
    def test_identical_embeddings(self):
        emb = np.tile([0.3, 0.4], (6, 1))
        assert silhouette(clusters_of([[0, 1, 2], [3, 4, 5]]), emb) == 0.0

    def test_single_cluster(self):
        assert silhouette(clusters_of([[0, 1]]), np.eye(2)) == 0.0

    def test_separated_blobs_positive(self, rng):
        emb = np.vstack([rng.normal([5, 0], 0.3, size=(10, 2)), rng.normal([0, 5], 0.3, size=(10, 2))])
        groups = [list(range(10)), list(range(10, 20))]
        value = silhouette(clusters_of(groups), emb)
        assert value > 0.4
        # two ordered off-diagonal terms out of four
        assert value <= 0.5

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_pairwise_oracle(self, seed):
        r = np.random.default_rng(seed)
        N, Z = 200, 8
        emb = r.normal(size=(N, 6))
        groups = [sorted(r.choice(N, size=r.integers(1, 30), replace=False).tolist()) for _ in range(Z)]
        got = silhouette(clusters_of(groups, num_items=N), emb)
        assert abs(got - silhouette_oracle(groups, emb)) <= 1e-12

    def test_terms_bounded(self, rng):
        for _ in range(20):
            emb = rng.normal(size=(30, 3))
            groups = [sorted(rng.choice(30, 5, replace=False).tolist()) for _ in range(2)]
            # with two clusters the value is (t12 + t21) / 4 and each term is in [-1, 1]
            assert -0.5 - 1e-12 <= silhouette(clusters_of(groups, num_items=30), emb) <= 0.5 + 1e-12

    def test_fully_shared_pair_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert silhouette(clusters_of([[0, 1], [0, 1]]), np.eye(2)) == 0.0
        assert "skipped" in caplog.text


class TestDiscriminator:
    def test_initial_loss_near_log_n(self, rng):
        disc = TagDiscriminator.init(12, 40, seed=0)
        x = (rng.random((40, 12)) < 0.3).astype(float)
        assert abs(disc.loss(x, np.arange(40)) - np.log(40)) < 0.5
        np.testing.assert_allclose(disc.predict_proba(x).sum(axis=1), 1.0, atol=1e-12)

    def test_learns_unique_signatures(self):
        N = 40
        E = np.zeros((N, 12))
        for i, combo in enumerate(itertools.combinations(range(12), 3)):
            if i == N:
                break
            E[i, list(combo)] = 1.0
        disc = train_discriminator(E, seed=0)
        accuracy = np.mean(disc.predict_proba(E).argmax(axis=1) == np.arange(N))
        assert accuracy > 5.0 / N
        assert disc.history

    def test_deterministic(self, rng):
        E = (rng.random((30, 8)) < 0.4).astype(float)
        a = train_discriminator(E, seed=3, max_epochs=5)
        b = train_discriminator(E, seed=3, max_epochs=5)
        for p, q in zip(a.weights + a.biases, b.weights + b.biases):
            np.testing.assert_array_equal(p, q)

    def test_gradient_matches_finite_differences(self, rng):
        disc = TagDiscriminator.init(5, 7, hidden=6, seed=1)
        params = disc.params()
        for p in params[3:]:
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
        x = (rng.random((9, 5)) < 0.5).astype(float)
        targets = rng.integers(0, 7, 9)
        grads = tape_grads(lambda: _cross_entropy(params, x, targets), params)
        for p, g in zip(params, grads):
            num = numeric_grad(lambda: _cross_entropy(params, x, targets).item(), p.data)
            assert rel_err(g, num) <= 1e-4


class TestInformativeness:
    def test_memorized_singleton(self):
        proba = np.array([[0.1, 0.8, 0.1]])
        assert informativeness(clusters_of([[1]], [[0, 1]], num_items=3), StubDiscriminator(proba), 18) == 1.0

    def test_matches_sort_oracle(self, rng):
        groups = [sorted(rng.choice(20, size=k, replace=False).tolist()) for k in (3, 5, 1, 7)]
        proba = rng.random((4, 20))
        got = informativeness(clusters_of(groups, [[0]] * 4, num_items=20), StubDiscriminator(proba), 18)
        want = np.mean([len(set(np.argsort(-proba[c])[: len(g)]) & set(g)) / len(g) for c, g in enumerate(groups)])
        assert abs(got - want) <= 1e-12

    def test_random_discriminator_expectation(self, rng):
        groups = [list(range(5))]
        clusters = clusters_of(groups, [[0]], num_items=25)
        draws = [informativeness(clusters, StubDiscriminator(rng.random((1, 25))), 18) for _ in range(4000)]
        assert abs(np.mean(draws) - 5 / 25) < 0.01


class TestOverall:
    @pytest.mark.parametrize("name", list(LASTFM))
    def test_published_rows(self, name):
        values, printed = LASTFM[name]
        report = ExplainabilityReport(*values)
        base = ExplainabilityReport(*LASTFM["Random"][0])
        assert abs(overall(report, base) - printed) <= 1e-4

    def test_identical_reports(self, rng):
        rep = ExplainabilityReport(*rng.random(4))
        assert overall(rep, rep) == 0.0

    def test_table_layout(self):
        reports = {name: ExplainabilityReport(*values) for name, (values, _) in LASTFM.items()}
        lines = format_report_table(reports).splitlines()
        assert lines[0].split("\t")[1:] == list(COLUMN_LABELS)
        ecf = lines[1].split("\t")
        assert ecf[0].strip() == "ECF" and ecf[1:] == ["0.7648", "0.6259", "0.1584", "0.2996", "1.5352"]
        assert lines[-1].split("\t")[-1] == "0.0000"

    def test_report_bounds(self, toy, toy_forest, toy_mf):
        _, tags = toy
        disc = train_discriminator(tags.entries, seed=0, max_epochs=20)
        rep = explainability_report(toy_forest.members[0].clusters, tags.entries, toy_mf.item_emb, disc)
        assert 0 <= rep.coverage <= 1 and 0 <= rep.utilization <= 1 and 0 <= rep.informativeness <= 1
        assert -1 <= rep.silhouette <= 1
        assert len(rep.details) == len(toy_forest.members[0].clusters)
