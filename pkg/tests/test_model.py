import logging

import numpy as np
import pytest
import scipy.sparse as sp

from ecf import tensor as T
from ecf.data import IdfWeights, ItemTagMatrix, compute_idf
from ecf.model import (
    EcfHyperParams,
    EcfModel,
    EcfObjective,
    SparseAffiliations,
    bpr_loss,
    compute_affiliations,
    extract_clusters,
    interaction_weights,
    item_affiliations,
    item_cluster_scores,
    loss_cf,
    loss_ind,
    loss_ts,
    predict,
    predict_rows,
    tag_distribution,
    tag_log_scores,
    tag_scores,
    user_affiliations,
)
from fdcheck import frozen_mask_surrogate, numeric_grad, rel_err, tape_grads

SIG = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731


def toy_problem(seed: int, **hp):
    """4 users, 6 items, 3 clusters, 4 tags, chosen so every cluster holds
    every tag (keeps the log tag scores away from their clamp)."""
    params = dict(num_clusters=3, dim=4, item_topk=2, user_topk=2, tags_per_cluster=2)
    params.update(hp)
    h = EcfHyperParams(**params)
    for s in range(seed, seed + 1000):
        r = np.random.default_rng(s)
        train = sp.csr_matrix((r.random((4, 6)) < 0.5).astype(float))
        if (train.sum(axis=1) == 0).any() or (train.sum(axis=1) == 6).any():
            continue
        E = (r.random((6, 4)) < 0.6).astype(float)
        if (E.sum(axis=0) == 0).any() or (E.sum(axis=0) == 6).any() or (E.sum(axis=1) == 0).any():
            continue
        model = EcfModel(r.normal(size=(4, 4)), r.normal(size=(6, 4)), r.normal(size=(3, 4)), h)
        X = item_affiliations(item_cluster_scores(model.V.data, model.H.data), h.item_topk, h.st_temperature).data
        if np.all(X.T @ E > 0):
            tags = ItemTagMatrix(E, ("a", "b", "c", "d"))
            dense = train.toarray()
            trip = np.array(
                [(u, i, j) for u in range(4) for i in range(6) for j in range(6) if dense[u, i] and not dense[u, j]]
            )
            return model, train, tags, trip
    raise RuntimeError("no suitable toy instance")


def _check_composite(model, loss_fn):
    """Tape gradient of the straight-through loss against finite
    differences of its frozen-mask surrogate."""
    grads = tape_grads(lambda: loss_fn(), model.params)
    worst = 0.0
    with frozen_mask_surrogate() as reset:
        reset()
        loss_fn()  # records the base-point masks

        def value():
            reset()
            return loss_fn().item()

        for p, g in zip(model.params, grads):
            worst = max(worst, rel_err(g, numeric_grad(value, p.data)))
    return worst


class TestAffiliations:
    def test_identical_vectors_score_one(self):
        v = np.array([[0.3, -1.2, 2.0]])
        np.testing.assert_allclose(item_cluster_scores(v, v).data, [[1.0]], atol=1e-12)

    def test_orthogonal_vectors_score_zero(self):
        np.testing.assert_allclose(item_cluster_scores(np.array([[1.0, 0.0]]), np.array([[0.0, 2.0]])).data, [[0.0]])

    def test_scores_match_scalar_oracle(self, rng):
        V, H = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        got = item_cluster_scores(V, H).data
        for i in range(4):
            for c in range(3):
                want = V[i] @ H[c] / ((np.linalg.norm(V[i]) + 1e-12) * (np.linalg.norm(H[c]) + 1e-12))
                assert abs(got[i, c] - want) <= 1e-12

    def test_full_width_equals_sigmoid(self, rng):
        s = rng.uniform(-1, 1, size=(5, 4))
        np.testing.assert_allclose(item_affiliations(s, 4, 2.0).data, SIG(s), rtol=1e-14)

    def test_single_entry_example(self):
        X = item_affiliations(np.array([[0.9, -0.2, 0.1]]), 1, 2.0).data
        np.testing.assert_allclose(X, [[SIG(0.9), 0.0, 0.0]], rtol=1e-14)
        assert round(X[0, 0], 4) == 0.7109

    def test_retained_indices_match_sort_oracle(self):
        s = np.random.default_rng(1).uniform(-1, 1, size=(1000, 12))
        X = item_affiliations(s, 5, 2.0).data
        oracle = np.sort(np.argsort(-s, axis=1)[:, :5], axis=1)
        got = np.sort(np.argsort(-(X > 0).astype(float), axis=1, kind="stable")[:, :5], axis=1)
        np.testing.assert_array_equal(got, oracle)
        np.testing.assert_array_equal((X > 0).sum(axis=1), 5)
        assert np.all((X[X > 0] > SIG(-1)) & (X[X > 0] < SIG(1)))

    def test_user_with_one_item_copies_item_scores(self, rng):
        scores = rng.uniform(-1, 1, size=(6, 4))
        w = interaction_weights(sp.csr_matrix(np.eye(1, 6, 2)))
        A = user_affiliations(w, scores, 4, 2.0).data
        np.testing.assert_allclose(A[0], SIG(scores[2]), rtol=1e-14)

    def test_user_rows_match_dense_oracle(self, rng):
        Y = (rng.random((5, 8)) < 0.5).astype(float)
        Y[0] = 0.0
        scores = rng.uniform(-1, 1, size=(8, 6))
        A = user_affiliations(interaction_weights(sp.csr_matrix(Y)), scores, 2, 2.0).data
        for u in range(5):
            if Y[u].sum() == 0:
                np.testing.assert_array_equal(A[u], 0.0)
                continue
            agg = Y[u] @ scores / Y[u].sum()
            want = np.zeros(6)
            top = np.argsort(-agg)[:2]
            want[top] = SIG(agg[top])
            np.testing.assert_allclose(A[u], want, rtol=1e-13)

    def test_scale_invariance(self, rng):
        model, train, _, _ = toy_problem(0)
        aff = compute_affiliations(model, train)
        scaled = EcfModel(model.U.data, model.V.data * rng.uniform(0.1, 10, size=(6, 1)), model.H.data * 3.0, model.hp)
        aff2 = compute_affiliations(scaled, train)
        np.testing.assert_array_equal(aff.item_index, aff2.item_index)
        np.testing.assert_allclose(aff.item_weight, aff2.item_weight, rtol=1e-12)
        np.testing.assert_allclose(aff.user_dense(), aff2.user_dense(), rtol=1e-12)


class TestPredict:
    def test_disjoint_is_zero(self):
        assert predict({0: 0.5}, {1: 0.7}) == 0.0

    def test_identical_single_entry(self):
        assert predict({2: 0.5}, {2: 0.5}) == 0.25

    def test_sparse_equals_dense_masked_dot(self, rng):
        for _ in range(200):
            a, x = np.zeros(10), np.zeros(10)
            a[rng.choice(10, 3, replace=False)] = rng.random(3)
            x[rng.choice(10, 4, replace=False)] = rng.random(4)
            sparse = predict({c: a[c] for c in np.flatnonzero(a)}, {c: x[c] for c in np.flatnonzero(x)})
            assert abs(sparse - float(a @ x)) <= 1e-12

    def test_predict_rows(self, rng):
        A, X = rng.random((3, 5)), rng.random((3, 5))
        np.testing.assert_allclose(predict_rows(A, X).data, (A * X).sum(axis=1))


class TestLosses:
    def test_bpr_equal_scores(self):
        assert abs(bpr_loss(np.zeros(3), np.zeros(3)).item() - 3 * np.log(2)) < 1e-12

    def test_bpr_large_margin_vanishes(self):
        assert bpr_loss(np.array([60.0]), np.array([0.0])).item() < 1e-20

    def test_cf_equal_or_zero_embeddings(self):
        trip = np.array([[0, 0, 1], [1, 1, 0]])
        U = np.ones((2, 3))
        V = np.tile([0.4, -0.2, 1.0], (2, 1))
        np.testing.assert_allclose(loss_cf(U, V, trip).item(), 2 * np.log(2), rtol=1e-12)
        np.testing.assert_allclose(loss_cf(np.zeros((2, 3)), np.zeros((2, 3)), trip).item(), 2 * np.log(2), rtol=1e-12)

    def test_tag_distribution_single_item(self):
        X = np.array([[0.5, 0.0]])
        E = np.array([[0.0, 1.0, 0.0]])
        np.testing.assert_allclose(tag_distribution(X, E).data, [[0.0, 0.5, 0.0], [0.0, 0.0, 0.0]])

    def test_tag_distribution_dense_oracle(self, rng):
        X, E = rng.random((7, 3)), (rng.random((7, 5)) < 0.4).astype(float)
        np.testing.assert_allclose(tag_distribution(X, E).data, X.T @ E, rtol=1e-14)

    def test_untagged_cluster_mass_on_reserved_tag(self):
        X = np.array([[0.6], [0.7]])
        E = np.array([[0.0, 1.0], [0.0, 1.0]])
        beta = tag_scores(tag_distribution(X, E), np.array([1.0, 1.0]), 2.0).data
        assert beta[0, 1] > 0.999

    def test_beta_rows_sum_to_one(self, rng):
        beta = tag_scores(rng.random((4, 6)) * 30, rng.random(6), 2.0).data
        np.testing.assert_allclose(beta.sum(axis=1), 1.0, atol=1e-12)

    def test_large_temperature_is_uniform_over_support(self):
        beta = tag_scores(np.array([[4.0, 1.0, 0.5, 2.0]]), np.ones(4), 1e6).data
        np.testing.assert_allclose(beta, 0.25, atol=1e-3)

    def test_ratio_four_to_one(self):
        beta = tag_scores(np.array([[4.0, 1.0]]), np.ones(2), 2.0).data
        np.testing.assert_allclose(beta[0, 0] / beta[0, 1], 2.0, rtol=1e-8)

    def test_linear_form(self):
        beta = tag_scores(np.array([[2.0, 0.0]]), np.ones(2), 1.0, form="linear").data
        np.testing.assert_allclose(beta[0, 0] / beta[0, 1], np.e**2, rtol=1e-12)

    def test_loss_ts_uniform(self):
        Z, P = 3, 4
        log_beta = np.log(np.full((Z, P), 1.0 / P))
        np.testing.assert_allclose(loss_ts(log_beta, P).item(), Z * P * np.log(P), rtol=1e-12)

    def test_loss_ts_sort_oracle(self, rng):
        log_beta = tag_log_scores(rng.random((5, 7)) * 5, rng.random(7), 2.0).data
        want = -np.sort(log_beta, axis=1)[:, ::-1][:, :3].sum()
        np.testing.assert_allclose(loss_ts(log_beta, 3).item(), want, rtol=1e-12)
        assert loss_ts(log_beta, 3).item() >= 0

    def test_mutual_info_orthogonal_pair(self):
        H = np.eye(2)
        np.testing.assert_allclose(loss_ind(H).item(), 2 * -np.log(np.e / (np.e + 1)), rtol=1e-10)
        assert round(-np.log(np.e / (np.e + 1)), 4) == 0.3133

    def test_orthogonality_of_orthogonal_rows(self):
        np.testing.assert_allclose(loss_ind(np.eye(3, 5) * 2.0, "orthogonality").item(), 0.0, atol=1e-5)

    def test_duplicated_rows_are_a_local_maximum_of_mi(self, rng):
        H = np.tile(rng.normal(size=(1, 4)), (3, 1))
        base = loss_ind(H).item()
        for _ in range(200):
            assert loss_ind(H + rng.normal(scale=1e-3, size=H.shape)).item() <= base + 1e-12

    def test_distance_correlation_bounds(self, rng):
        H = rng.normal(size=(4, 6))
        value = loss_ind(H, "distance_correlation").item()
        assert 0.0 <= value <= 6.0 + 1e-9
        assert abs(loss_ind(np.tile(H[:1], (2, 1)), "distance_correlation").item() - 1.0) < 1e-6

    def test_single_cluster_is_zero_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert loss_ind(np.ones((1, 3))).item() == 0.0
        assert "two clusters" in caplog.text

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            loss_ind(np.eye(2), "nope")


class TestObjective:
    def test_breakdown_identity(self):
        model, train, tags, trip = toy_problem(0)
        obj = EcfObjective(train, tags, compute_idf(tags), model.hp)
        loss, parts, _ = obj(model, trip)
        assert abs(parts.tc - (parts.cs + parts.ts + parts.ind)) <= 1e-12
        assert abs(parts.total - (parts.tc + 0.6 * parts.cf)) <= 1e-12
        assert loss.item() == parts.total

    def test_zero_lambda(self):
        model, train, tags, trip = toy_problem(0, cf_weight=0.0)
        _, parts, _ = EcfObjective(train, tags, compute_idf(tags), model.hp)(model, trip)
        assert parts.total == parts.tc

    def test_defaults(self):
        hp = EcfHyperParams()
        assert (hp.num_clusters, hp.dim, hp.item_topk, hp.user_topk) == (64, 64, 20, 20)
        assert (hp.st_temperature, hp.tag_temperature, hp.cf_weight, hp.tags_per_cluster) == (2.0, 2.0, 0.6, 4)

    def test_activated_covers_batch_masks(self):
        model, train, tags, trip = toy_problem(0)
        _, _, activated = EcfObjective(train, tags, compute_idf(tags), model.hp)(model, trip[:2])
        aff = compute_affiliations(model, train)
        want = np.zeros(3, dtype=bool)
        want[aff.item_index[np.unique(trip[:2, 1:])].ravel()] = True
        want[aff.user_index[np.unique(trip[:2, 0])].ravel()] = True
        np.testing.assert_array_equal(activated, want)


class TestCompositeGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_cluster_score_loss(self, seed):
        model, train, tags, trip = toy_problem(seed)
        hp = model.hp
        w = interaction_weights(train)

        def l_cs():
            scores = item_cluster_scores(model.V, model.H)
            X = item_affiliations(scores, hp.item_topk, hp.st_temperature)
            A = user_affiliations(w, scores, hp.user_topk, hp.st_temperature)
            return bpr_loss(
                predict_rows(T.gather_rows(A, trip[:, 0]), T.gather_rows(X, trip[:, 1])),
                predict_rows(T.gather_rows(A, trip[:, 0]), T.gather_rows(X, trip[:, 2])),
            )

        assert _check_composite(model, l_cs) <= 1e-3

    @pytest.mark.parametrize("seed", range(3))
    def test_tag_loss(self, seed):
        model, train, tags, _ = toy_problem(seed)
        hp = model.hp
        idf = compute_idf(tags).weights

        def l_ts():
            X = item_affiliations(item_cluster_scores(model.V, model.H), hp.item_topk, hp.st_temperature)
            return loss_ts(tag_log_scores(tag_distribution(X, tags.entries), idf, hp.tag_temperature), hp.tags_per_cluster)

        assert _check_composite(model, l_ts) <= 1e-3

    @pytest.mark.parametrize("variant", ["mutual_info", "orthogonality", "distance_correlation"])
    def test_independence_losses(self, variant, rng):
        H = T.Tensor(rng.normal(size=(4, 5)))
        (g,) = tape_grads(lambda: loss_ind(H, variant), [H])
        assert rel_err(g, numeric_grad(lambda: loss_ind(H, variant).item(), H.data)) <= 1e-3

    def test_cf_loss(self):
        model, _, _, trip = toy_problem(1)
        assert _check_composite(model, lambda: loss_cf(model.U, model.V, trip)) <= 1e-3

    @pytest.mark.parametrize("variant", ["mutual_info", "orthogonality", "distance_correlation"])
    def test_full_objective(self, variant):
        model, train, tags, trip = toy_problem(2, independence=variant)
        obj = EcfObjective(train, tags, compute_idf(tags), model.hp)
        assert _check_composite(model, lambda: obj(model, trip)[0]) <= 1e-3

    def test_adam_decreases_moving_average(self):
        model, train, tags, trip = toy_problem(0)
        obj = EcfObjective(train, tags, compute_idf(tags), model.hp)
        state = T.AdamState.for_params(model.params, lr=1e-2)
        losses = []
        for _ in range(100):
            grads = tape_grads(lambda: obj(model, trip)[0], model.params)
            losses.append(obj(model, trip)[1].total)
            T.adam_step(state, model.params, grads)
        avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
        assert avg[-1] < avg[0]


class TestExtraction:
    def test_members_equal_transpose_oracle(self):
        model, train, tags, _ = toy_problem(0)
        aff = compute_affiliations(model, train)
        clusters = extract_clusters(model, aff, tags, compute_idf(tags))
        X = aff.item_dense()
        for c in clusters:
            assert c.members == tuple(np.flatnonzero(X[:, c.cluster_id]).tolist())
            assert len(c.tags) == 2

    def test_full_width_clusters_hold_every_item(self):
        model, train, tags, _ = toy_problem(0, item_topk=3)
        aff = compute_affiliations(model, train)
        clusters = extract_clusters(model, aff, tags, compute_idf(tags))
        assert all(c.members == tuple(range(6)) for c in clusters)

    def test_sparse_rows_have_exact_width(self):
        model, train, _, _ = toy_problem(0)
        aff = compute_affiliations(model, train)
        assert aff.item_index.shape == (6, 2) and aff.user_index.shape == (4, 2)
        np.testing.assert_array_equal((aff.item_dense() > 0).sum(axis=1), 2)

    def test_empty_clusters_reported(self, caplog):
        aff = SparseAffiliations(
            3, np.array([[0], [0]]), np.array([[0.6], [0.6]]), np.array([[0]]), np.array([[0.6]]), np.array([True])
        )
        hp = EcfHyperParams(num_clusters=3, dim=2, item_topk=1, user_topk=1, tags_per_cluster=1)
        model = EcfModel(np.ones((1, 2)), np.ones((2, 2)), np.ones((3, 2)), hp)
        tags = ItemTagMatrix(np.eye(2), ("x", "y"))
        with caplog.at_level(logging.WARNING):
            clusters = extract_clusters(model, aff, tags, IdfWeights(np.ones(2), 2))
        assert clusters.empty_clusters == [1, 2]
        assert "empty" in caplog.text
