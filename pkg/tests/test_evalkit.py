import itertools

import numpy as np
import pytest

from fungi import autodiff as ad
from fungi import evalkit as ek


def brute_force_knn(train_x, train_y, query, k):
    """Independent oracle: all-pairs distances, same declared tie rules."""
    dists = np.array([np.sqrt(np.sum((t - query) ** 2)) for t in train_x])
    order = sorted(range(len(train_x)), key=lambda i: (dists[i], i))[:k]
    labels = train_y[order]
    counts = {}
    for lbl in labels:
        counts[lbl] = counts.get(lbl, 0) + 1
    top = max(counts.values())
    winners = [c for c, n in counts.items() if n == top]
    if len(winners) == 1:
        return winners[0]
    weights = {
        c: sum(1.0 / (dists[i] + 1e-12) for i in order if train_y[i] == c)
        for c in winners
    }
    best = max(weights.values())
    return min(c for c in winners if weights[c] == best)


class TestKnn:
    def test_query_on_train_point_k1(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(20, 4))
        y = rng.integers(0, 3, size=20)
        index = ek.KnnIndex(x, y)
        assert ek.knn_classify(index, x[7], k=1) == y[7]

    @pytest.mark.parametrize("k", [1, 20])
    def test_matches_brute_force_oracle(self, k):
        rng = np.random.default_rng(1)
        train = rng.normal(size=(300, 8))
        train_y = rng.integers(0, 5, size=300)
        queries = rng.normal(size=(60, 8))
        index = ek.KnnIndex(train, train_y)
        got = ek.knn_classify(index, queries, k=k)
        want = [brute_force_knn(train, train_y, q, k) for q in queries]
        assert np.array_equal(got, want)

    def test_duplicated_coordinates_leave_predictions_unchanged(self):
        rng = np.random.default_rng(2)
        train = rng.normal(size=(100, 5))
        train_y = rng.integers(0, 4, size=100)
        queries = rng.normal(size=(25, 5))
        a = ek.knn_classify(ek.KnnIndex(train, train_y), queries, k=7)
        b = ek.knn_classify(
            ek.KnnIndex(np.hstack([train, train]), train_y),
            np.hstack([queries, queries]),
            k=7,
        )
        assert np.array_equal(a, b)

    def test_k_exceeds_index(self):
        index = ek.KnnIndex(np.zeros((3, 2)), np.zeros(3))
        with pytest.raises(ValueError):
            ek.knn_classify(index, np.zeros(2), k=5)

    def test_vote_tie_breaks_by_inverse_distance(self):
        # two labels, one neighbor each: the closer one wins
        train = np.array([[0.0], [1.0]])
        labels = np.array([5, 9])
        pred = ek.knn_classify(ek.KnnIndex(train, labels), np.array([0.2]), k=2)
        assert pred == 5


class TestFewShot:
    def test_counts(self):
        labels = np.repeat(np.arange(10), 30)
        rows = ek.few_shot_subset(labels, shots=5, seed=3)
        assert len(rows) == 50
        picked = labels[rows]
        assert all(np.sum(picked == c) == 5 for c in range(10))

    def test_seed_determinism(self):
        labels = np.repeat(np.arange(4), 9)
        a = ek.few_shot_subset(labels, 5, seed=8)
        b = ek.few_shot_subset(labels, 5, seed=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, ek.few_shot_subset(labels, 5, seed=9))

    def test_insufficient_class(self):
        with pytest.raises(ValueError):
            ek.few_shot_subset(np.array([0, 0, 1]), shots=2, seed=0)


class TestAccuracy:
    def test_all_correct(self):
        assert ek.accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_mean_per_class_ignores_sizes(self):
        labels = np.array([0] * 90 + [1] * 10)
        preds = np.array([0] * 90 + [0] * 10)  # class 1 fully wrong
        assert ek.accuracy(preds, labels, mode="mean_per_class") == 0.5

    def test_matches_confusion_matrix_tally(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 6, size=500)
        preds = rng.integers(0, 6, size=500)
        confusion = np.zeros((6, 6))
        for p, t in zip(preds, labels):
            confusion[t, p] += 1
        want_top1 = confusion.trace() / confusion.sum()
        want_mpc = np.mean(np.diag(confusion) / confusion.sum(axis=1))
        assert abs(ek.accuracy(preds, labels) - want_top1) < 1e-12
        assert abs(ek.accuracy(preds, labels, "mean_per_class") - want_mpc) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ek.accuracy([], [])


class TestPerClassDelta:
    def test_identical_reports_zero(self):
        a = {0: 0.5, 1: 0.75}
        deltas = ek.per_class_delta(a, dict(a))
        assert all(v == 0 for v in deltas.values())

    def test_mean_delta_equals_accuracy_difference(self):
        rng = np.random.default_rng(5)
        labels = np.repeat(np.arange(5), 20)
        pa = rng.integers(0, 5, size=100)
        pb = rng.integers(0, 5, size=100)
        da = ek.per_class_accuracy(pa, labels)
        db = ek.per_class_accuracy(pb, labels)
        deltas = ek.per_class_delta(da, db)
        want = ek.accuracy(pa, labels, "mean_per_class") - ek.accuracy(pb, labels, "mean_per_class")
        assert abs(np.mean(list(deltas.values())) - want) < 1e-12

    def test_three_class_spot_check(self):
        a = {0: 1.0, 1: 0.5, 2: 0.0}
        b = {0: 0.5, 1: 0.5, 2: 0.25}
        assert ek.per_class_delta(a, b) == {0: 0.5, 1: 0.0, 2: -0.25}

    def test_class_mismatch(self):
        with pytest.raises(ValueError):
            ek.per_class_delta({0: 1.0}, {1: 1.0})


class TestCka:
    def test_self_similarity_is_one(self):
        x = np.random.default_rng(6).normal(size=(50, 12))
        assert abs(ek.linear_cka(x, x) - 1.0) < 1e-10

    def test_orthogonal_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(60, 10))
        q = np.linalg.qr(rng.normal(size=(10, 10)))[0]
        assert abs(ek.linear_cka(x, x @ q) - 1.0) < 1e-8
        assert abs(ek.linear_cka(x, 3.7 * x) - 1.0) < 1e-8

    def test_independent_features_score_low(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1000, 64))
        y = rng.normal(size=(1000, 64))
        assert ek.linear_cka(x, y) < 0.2

    def test_symmetry(self):
        rng = np.random.default_rng(9)
        x, y = rng.normal(size=(40, 6)), rng.normal(size=(40, 9))
        assert abs(ek.linear_cka(x, y) - ek.linear_cka(y, x)) < 1e-10

    def test_zero_variance_rejected(self):
        with pytest.raises(ValueError):
            ek.linear_cka(np.ones((10, 3)), np.random.default_rng(0).normal(size=(10, 3)))


class TestHungarian:
    def brute_force(self, cost):
        n = cost.shape[0]
        best, best_perm = np.inf, None
        for perm in itertools.permutations(range(n)):
            total = sum(cost[i, perm[i]] for i in range(n))
            if total < best:
                best, best_perm = total, perm
        return best, best_perm

    def test_against_exhaustive_search(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            cost = rng.integers(0, 50, size=(7, 7)).astype(np.float64)
            assignment, total = ek.hungarian(cost)
            want_total, _ = self.brute_force(cost)
            assert total == want_total
            assert sorted(assignment) == list(range(7))

    def test_identity_cost(self):
        cost = 1.0 - np.eye(5)
        assignment, total = ek.hungarian(cost)
        np.testing.assert_array_equal(assignment, np.arange(5))
        assert total == 0.0

    def test_rectangular_padded(self):
        cost = np.array([[1.0, 0.0, 2.0], [2.0, 3.0, 0.0]])
        assignment, total = ek.hungarian(cost)
        assert total == 0.0
        np.testing.assert_array_equal(assignment, [1, 2])


class TestKmeansAndOverlap:
    def blobs(self, seed, n_per=40, classes=4, dim=6, spread=8.0):
        rng = np.random.default_rng(seed)
        centers = rng.normal(size=(classes, dim)) * spread
        x = np.concatenate([centers[c] + rng.normal(size=(n_per, dim)) * 0.3 for c in range(classes)])
        y = np.repeat(np.arange(classes), n_per)
        return x, y

    def test_separated_blobs_full_overlap(self):
        x, y = self.blobs(11)
        result = ek.kmeans(x, 4, seed=0)
        assert ek.cluster_overlap(result.assignments, y) == 1.0

    def test_objective_non_increasing(self):
        x, _ = self.blobs(12, spread=2.0)

        def inertia_after(iters):
            return ek.kmeans(x, 4, seed=1, max_iter=iters).inertia

        values = [inertia_after(i) for i in range(1, 8)]
        assert all(a >= b - 1e-9 for a, b in zip(values, values[1:]))

    def test_seed_determinism(self):
        x, _ = self.blobs(13)
        a = ek.kmeans(x, 4, seed=2)
        b = ek.kmeans(x, 4, seed=2)
        np.testing.assert_array_equal(a.assignments, b.assignments)

    def test_more_clusters_than_points(self):
        with pytest.raises(ValueError):
            ek.kmeans(np.zeros((3, 2)), 4)


class TestProbe:
    def test_linearly_separable_hits_full_accuracy(self):
        rng = np.random.default_rng(14)
        x = np.concatenate([rng.normal(size=(40, 2)) + [4, 0], rng.normal(size=(40, 2)) - [4, 0]])
        y = np.repeat([0, 1], 40)
        result = ek.logistic_probe(x, y, lambda_grid=[1e-6], seed=0)
        assert ek.accuracy(result.model.predict(x), y) == 1.0

    def test_huge_lambda_gives_near_uniform_predictions(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(60, 4))
        y = rng.integers(0, 3, size=60)
        result = ek.logistic_probe(x, y, lambda_grid=[1e6], seed=0)
        probs = result.model.predict_proba(x)
        assert np.abs(probs - 1.0 / 3).max() < 0.05

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(30, 5))
        y = rng.integers(0, 3, size=30)
        lam = 1e-3
        wb0 = rng.normal(size=3 * 5 + 3) * 0.1
        _, got = ek.probe_loss_and_grad(wb0, x, y, 3, lam)
        want = ad.finite_diff_gradient(
            lambda p: ek.probe_loss_and_grad(p, x, y, 3, lam)[0], wb0, eps=1e-6
        )
        assert ad.max_relative_error(got, want) < 1e-6

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            ek.logistic_probe(np.zeros((5, 2)), np.zeros(5))

    def test_validation_split_selects_lambda(self):
        rng = np.random.default_rng(17)
        x = np.concatenate([rng.normal(size=(50, 3)) + 2, rng.normal(size=(50, 3)) - 2])
        y = np.repeat([0, 1], 50)
        result = ek.logistic_probe(x, y, seed=1)
        assert result.best_lambda in np.linspace(5e-6, 5e-4, 5)
        assert result.val_accuracy > 0.9


class TestRetrievalMap:
    def test_single_relevant_ranked_first(self):
        gallery = np.array([[1.0, 0.0], [0.0, 1.0]])
        query = np.array([[1.0, 0.1]])
        m, _ = ek.retrieval_map(query, gallery, [{0}])
        assert m == 1.0

    def test_relevant_second_of_two(self):
        gallery = np.array([[1.0, 0.0], [0.0, 1.0]])
        query = np.array([[1.0, 0.1]])
        m, _ = ek.retrieval_map(query, gallery, [{1}])
        assert m == 0.5

    def test_matches_bruteforce_ap(self):
        rng = np.random.default_rng(18)
        gallery = rng.normal(size=(40, 6))
        queries = rng.normal(size=(10, 6))
        relevance = [set(rng.choice(40, size=rng.integers(1, 8), replace=False)) for _ in range(10)]
        got, aps = ek.retrieval_map(queries, gallery, relevance)

        def ap_oracle(q, rel):
            sims = (gallery / np.linalg.norm(gallery, axis=1, keepdims=True)) @ (q / np.linalg.norm(q))
            order = np.argsort(-sims, kind="stable")
            hits, precision_sum = 0, 0.0
            for rank, g in enumerate(order, start=1):
                if g in rel:
                    hits += 1
                    precision_sum += hits / rank
            return precision_sum / len(rel)

        want = [ap_oracle(q, r) for q, r in zip(queries, relevance)]
        np.testing.assert_allclose(aps, want, atol=1e-12)
        assert abs(got - np.mean(want)) < 1e-12

    def test_empty_gallery(self):
        with pytest.raises(ValueError):
            ek.retrieval_map(np.ones((1, 2)), np.zeros((0, 2)), [set()])

    def test_skip_empty_flag(self):
        gallery = np.array([[1.0, 0.0], [0.0, 1.0]])
        queries = np.array([[1.0, 0.0], [0.0, 1.0]])
        m_skip, aps = ek.retrieval_map(queries, gallery, [{0}, set()])
        assert m_skip == 1.0 and len(aps) == 1
        m_zero, aps = ek.retrieval_map(queries, gallery, [{0}, set()], skip_empty=False)
        assert m_zero == 0.5 and len(aps) == 2


class TestReports:
    def test_csv_rows(self):
        report = ek.EvalReport("knn_top1", 0.75, per_class={1: 0.5, 0: 1.0})
        rows = report.csv_rows()
        assert rows[1] == ("knn_top1", "", "0.750000")
        assert rows[2][1] == "0"

    def test_write_csv(self, tmp_path):
        path = tmp_path / "report.csv"
        ek.write_csv(path, [ek.EvalReport("m", 0.5)], config_lines=["seed=1"])
        text = path.read_text()
        assert text.startswith("# seed=1\n")
        assert "m,,0.500000" in text

    def test_render_table(self):
        table = ek.render_table([["a", "1"], ["bb", "22"]], header=["name", "v"])
        lines = table.splitlines()
        assert len(lines) == 4
        assert lines[0].startswith("name")
