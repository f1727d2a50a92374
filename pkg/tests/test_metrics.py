import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cdr.datamodel import RatingTable
from cdr.metrics import (MetricsReport, analyze_poisonous, auc, evaluate, ndcg_at_k, rank_within_user,
                         recall_at_k)
from cdr.models import FactorModel, LossKind, pointwise_error


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def brute_ranking(users, items, scores):
    by_user = {}
    for idx, u in enumerate(users):
        by_user.setdefault(u, []).append(idx)
    ranks = {}
    for u, idxs in by_user.items():
        ordered = sorted(idxs, key=lambda j: (-scores[j], items[j]))
        for r, j in enumerate(ordered, start=1):
            ranks[j] = r
    return by_user, ranks


def brute_ndcg_recall(users, items, scores, labels, k):
    by_user, ranks = brute_ranking(users, items, scores)
    ndcgs, recalls = [], []
    for u, idxs in by_user.items():
        pos = [j for j in idxs if labels[j] == 1]
        if not pos:
            continue
        dcg = sum(1 / math.log2(ranks[j] + 1) for j in pos if ranks[j] <= k)
        idcg = sum(1 / math.log2(r + 1) for r in range(1, min(len(pos), k) + 1))
        ndcgs.append(dcg / idcg)
        recalls.append(sum(ranks[j] <= k for j in pos) / len(pos))
    return sum(ndcgs) / len(ndcgs), sum(recalls) / len(recalls)


def random_instance(rng):
    num_users = int(rng.integers(1, 6))
    users, items = [], []
    for u in range(num_users):
        count = int(rng.integers(2, 13))
        users += [u] * count
        items += rng.choice(30, size=count, replace=False).tolist()
    n = len(users)
    scores = np.round(rng.normal(size=n), 1)  # coarse rounding forces ties
    labels = (rng.random(n) < 0.4).astype(float)
    labels[0], labels[1] = 1.0, 0.0
    return np.array(users), np.array(items), scores, labels


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_hand_example(self):
        assert auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(ValueError):
            auc([0.1, 0.2], [1, 1])

    def test_brute_force(self, rng):
        for _ in range(200):
            _, _, s, l = random_instance(rng)
            assert auc(s, l) == pytest.approx(brute_auc(s, l), abs=1e-12)

    @given(st.lists(st.tuples(st.integers(-20, 20), st.sampled_from([0.0, 1.0])), min_size=2, max_size=40))
    def test_increasing_transform_invariance(self, rows):
        s = np.array([r[0] for r in rows], dtype=float)
        l = np.array([r[1] for r in rows])
        if l.min() == l.max():
            return
        assert auc(s, l) == auc(3 * s + 1, l) == auc(np.exp(s / 7), l)


class TestRanking:
    def test_ties_by_item_index(self):
        ranks = rank_within_user([0, 0, 0, 1], [5, 2, 9, 0], [0.5, 0.5, 0.9, 0.1])
        np.testing.assert_array_equal(ranks, [3, 2, 1, 1])

    def test_permutation_per_user(self, rng):
        u, i, s, _ = random_instance(rng)
        ranks = rank_within_user(u, i, s)
        for user in np.unique(u):
            assert sorted(ranks[u == user]) == list(range(1, np.count_nonzero(u == user) + 1))


class TestNdcgRecall:
    def test_single_positive_first(self):
        assert ndcg_at_k([0] * 3, [0, 1, 2], [0.9, 0.5, 0.1], [1, 0, 0], 5) == 1.0

    def test_single_positive_sixth(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
        assert ndcg_at_k([0] * 6, list(range(6)), scores, [0, 0, 0, 0, 0, 1], 5) == 0.0

    def test_positives_at_one_and_three(self):
        v = ndcg_at_k([0] * 5, list(range(5)), [5, 4, 3, 2, 1], [1, 0, 1, 0, 0], 5)
        assert v == pytest.approx((1 + 1 / math.log2(4)) / (1 + 1 / math.log2(3)), rel=1e-15)
        assert v == pytest.approx(0.91972, abs=1e-5)

    def test_recall_examples(self):
        assert recall_at_k([0] * 3, [0, 1, 2], [3, 2, 1], [1, 1, 0], 2) == 1.0
        assert recall_at_k([0] * 3, [0, 1, 2], [1, 2, 3], [1, 0, 0], 2) == 0.0
        scores = -np.arange(8.0)
        labels = [0, 1, 0, 0, 0, 0, 1, 0]  # positives at ranks 2 and 7
        assert recall_at_k([0] * 8, list(range(8)), scores, labels, 5) == 0.5

    def test_users_without_positives_excluded(self):
        users, items = [0, 0, 1, 1], [0, 1, 0, 1]
        assert ndcg_at_k(users, items, [1, 0, 1, 0], [1, 0, 0, 0], 1) == 1.0

    def test_errors(self):
        with pytest.raises(ValueError):
            ndcg_at_k([0, 0], [0, 1], [1, 0], [1, 0], 0)
        with pytest.raises(ValueError):
            recall_at_k([0, 0], [0, 1], [1, 0], [0, 0], 5)

    def test_brute_force(self, rng):
        for _ in range(200):
            u, i, s, l = random_instance(rng)
            k = int(rng.integers(1, 8))
            ndcg, rec = brute_ndcg_recall(u.tolist(), i.tolist(), s.tolist(), l.tolist(), k)
            assert ndcg_at_k(u, i, s, l, k) == pytest.approx(ndcg, abs=1e-12)
            assert recall_at_k(u, i, s, l, k) == pytest.approx(rec, abs=1e-12)

    def test_recall_nondecreasing_in_k(self, rng):
        for _ in range(50):
            u, i, s, l = random_instance(rng)
            r = [recall_at_k(u, i, s, l, k) for k in range(1, 14)]
            assert all(a <= b + 1e-15 for a, b in zip(r, r[1:]))

    def test_ndcg_nondecreasing_once_k_covers_positives(self, rng):
        # the ideal DCG is fixed from k = max positives per user onward
        for _ in range(50):
            u, i, s, l = random_instance(rng)
            start = int(max(np.sum(l[u == user]) for user in np.unique(u)))
            n = [ndcg_at_k(u, i, s, l, k) for k in range(max(start, 1), 14)]
            assert all(a <= b + 1e-15 for a, b in zip(n, n[1:]))

    def test_ndcg_can_drop_when_k_grows(self):
        # positives at ranks 1 and 3: the ideal DCG grows faster than the DCG
        args = ([0] * 5, list(range(5)), [5, 4, 3, 2, 1], [1, 0, 1, 0, 0])
        assert ndcg_at_k(*args, k=1) == 1.0
        assert ndcg_at_k(*args, k=2) < 1.0

    def test_per_user_monotone_transform_invariance(self, rng):
        u, i, s, l = random_instance(rng)
        shifted = s * 2 + u * 100.0  # order-preserving within each user
        assert ndcg_at_k(u, i, s, l, 5) == ndcg_at_k(u, i, shifted, l, 5)
        assert recall_at_k(u, i, s, l, 5) == recall_at_k(u, i, shifted, l, 5)

    def test_in_unit_interval(self, rng):
        for _ in range(50):
            u, i, s, l = random_instance(rng)
            assert 0.0 <= ndcg_at_k(u, i, s, l, 5) <= 1.0
            assert 0.0 <= recall_at_k(u, i, s, l, 5) <= 1.0


def one_user_model(item_logits):
    n = len(item_logits)
    return FactorModel(np.zeros((1, 1)), np.zeros((n, 1)), np.zeros(1), np.array(item_logits, float), [0.0])


class TestPoisonous:
    def test_exact_imputation_is_never_poisonous(self):
        labels = np.array([1.0, 0.0, 1.0, 0.0])
        test = RatingTable(1, 4, [0] * 4, [0, 1, 2, 3], labels)
        rec = one_user_model([0.3, -1.0, 2.0, 0.5])
        imp = one_user_model(np.where(labels == 1, 800.0, -800.0))  # predicts the labels exactly
        assert analyze_poisonous(rec, imp, test) == 0.0

    def test_three_pairs(self):
        test = RatingTable(1, 3, [0, 0, 0], [0, 1, 2], [1.0, 1.0, 1.0])
        rec = one_user_model([math.log(9)] * 3)  # r_hat = 0.9
        y = np.array([1.0 - 1e-12, 0.99, 0.5])
        imp = one_user_model(np.log(y) - np.log1p(-y))
        e = pointwise_error(1.0, 0.9)
        e_hat = pointwise_error(y, 0.9)
        assert np.count_nonzero(np.abs(e_hat - e) > e) == 1
        assert analyze_poisonous(rec, imp, test) == pytest.approx(1 / 3)

    def test_requires_imputation_model(self):
        test = RatingTable(1, 2, [0, 0], [0, 1], [1.0, 0.0])
        with pytest.raises(ValueError):
            analyze_poisonous(one_user_model([0, 0]), None, test)


class TestReport:
    def test_evaluate_and_serialize(self):
        test = RatingTable(2, 3, [0, 0, 0, 1, 1], [0, 1, 2, 0, 2], [1, 0, 1, 0, 1])
        rec = FactorModel(np.ones((2, 1)), np.array([[2.0], [1.0], [0.5]]), np.zeros(2), np.zeros(3), [0.0])
        rep = evaluate(rec, test, k=5, imp_model=rec)
        body = json.loads(rep.to_json())
        assert set(body) == {"auc", "ndcg_at_k", "recall_at_k", "k", "poisonous_ratio"}
        assert body["k"] == 5 and rep.recall_at_k == 1.0
        row = next(csv.reader(io.StringIO(rep.csv_row("drjl+cdr", "coat", 3, 0.5))))
        assert row[:4] == ["drjl+cdr", "coat", "3", "0.5"] and len(row) == 9
        assert MetricsReport.CSV_HEADER.count(",") == 8

    def test_default_k_is_five(self):
        assert evaluate.__defaults__[0] == 5
