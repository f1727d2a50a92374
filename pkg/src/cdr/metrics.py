"""Ranking/classification metrics and the poisonous-imputation analysis."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .estimators import poisonous_ratio
from .kernels import auc_from_sorted
from .models import LossKind, pointwise_error


def auc(scores, labels) -> float:
    """Global AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n_pos = np.count_nonzero(labels == 1)
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("AUC needs at least one positive and one negative label")
    order = np.argsort(scores, kind="stable")
    return auc_from_sorted(scores[order], labels[order])


def rank_within_user(users, items, scores):
    """1-based rank of each record among its user's records.

    Higher score ranks first; ties go to the lower item index.
    """
    users = np.asarray(users)
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((items, -scores, users))
    sorted_users = users[order]
    starts = np.r_[0, np.flatnonzero(sorted_users[1:] != sorted_users[:-1]) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, len(users)]))
    ranks = np.empty(len(users), dtype=np.int64)
    ranks[order] = np.arange(len(users)) - group_start + 1
    return ranks


def _positive_counts(users, labels, ranks, k):
    if k < 1:
        raise ValueError("k must be at least 1")
    _, uid = np.unique(np.asarray(users), return_inverse=True)
    pos = np.asarray(labels) == 1
    n_pos = np.bincount(uid, weights=pos.astype(np.float64))
    if not np.any(n_pos > 0):
        raise ValueError("no user has a positive test item")
    hit = pos & (ranks <= k)
    return uid, hit, n_pos


def ndcg_at_k(users, items, scores, labels, k=5) -> float:
    """Mean NDCG@k over users with at least one positive test item.

    Gains count positive items only; ranks are taken among the user's test items.
    """
    ranks = rank_within_user(users, items, scores)
    uid, hit, n_pos = _positive_counts(users, labels, ranks, k)
    dcg = np.bincount(uid, weights=np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0),
                      minlength=len(n_pos))
    discounts = np.r_[0.0, np.cumsum(1.0 / np.log2(np.arange(1, k + 1) + 1.0))]
    idcg = discounts[np.minimum(n_pos, k).astype(np.int64)]
    keep = n_pos > 0
    return float(np.mean(dcg[keep] / idcg[keep]))


def recall_at_k(users, items, scores, labels, k=5) -> float:
    """Mean fraction of each user's positive test items ranked within the top k."""
    ranks = rank_within_user(users, items, scores)
    uid, hit, n_pos = _positive_counts(users, labels, ranks, k)
    hits = np.bincount(uid, weights=hit.astype(np.float64), minlength=len(n_pos))
    keep = n_pos > 0
    return float(np.mean(hits[keep] / n_pos[keep]))


@dataclass
class MetricsReport:
    auc: float
    ndcg_at_k: float
    recall_at_k: float
    k: int
    poisonous_ratio: Optional[float] = None

    def to_json(self):
        return json.dumps(asdict(self))

    def csv_row(self, method, dataset, seed, eta):
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(
            [method, dataset, seed, "" if eta is None else eta,
             self.auc, self.ndcg_at_k, self.recall_at_k, self.k,
             "" if self.poisonous_ratio is None else self.poisonous_ratio])
        return buf.getvalue()

    CSV_HEADER = "method,dataset,seed,eta,auc,ndcg_at_k,recall_at_k,k,poisonous_ratio\n"


def imputed_errors(rec_model, imp_model, users, items, loss_kind=LossKind.BCE):
    """(e_hat, r_hat): error of the prediction against the imputed label."""
    r_hat = rec_model.predict_many(users, items)
    return pointwise_error(imp_model.predict_many(users, items), r_hat, loss_kind), r_hat


def analyze_poisonous(rec_model, imp_model, test, loss_kind=LossKind.BCE) -> float:
    """Share of test pairs whose (dropout-free) imputation is poisonous."""
    if imp_model is None:
        raise ValueError("poisonous analysis requires an imputation model")
    e_hat, r_hat = imputed_errors(rec_model, imp_model, test.users, test.items, loss_kind)
    e = pointwise_error(test.values, r_hat, loss_kind)
    return poisonous_ratio(e, e_hat)


def evaluate(rec_model, test, k=5, imp_model=None, loss_kind=LossKind.BCE) -> MetricsReport:
    scores = rec_model.predict_many(test.users, test.items)
    return MetricsReport(
        auc=auc(scores, test.values),
        ndcg_at_k=ndcg_at_k(test.users, test.items, scores, test.values, k),
        recall_at_k=recall_at_k(test.users, test.items, scores, test.values, k),
        k=k,
        poisonous_ratio=None if imp_model is None else analyze_poisonous(rec_model, imp_model, test, loss_kind),
    )
