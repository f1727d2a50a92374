"""Numpy implementations of the compiled kernels in ``_core.pyx``.

Summation kernels reproduce the compiled loops operation for operation, so
results are bit-identical; loops over the summed axis are kept and the
independent axis is vectorized.
"""
import numpy as np


def compensated_sum(x):
    s = 0.0
    c = 0.0
    for v in np.asarray(x, dtype=np.float64).tolist():
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
    return s + c


def _add_columns(s, c, x):
    t = s + x
    c += np.where(np.abs(s) >= np.abs(x), (s - t) + x, (x - t) + s)
    return t, c


def compensated_row_sums(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    s = np.zeros(x.shape[0])
    c = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        s, c = _add_columns(s, c, x[:, j])
    return s + c


def cdr_trial_losses(obs, e, e_hat, p_hat, gamma):
    obs = np.asarray(obs)
    n = obs.shape[1]
    s = np.zeros(obs.shape[0])
    c = np.zeros(obs.shape[0])
    for j in range(n):
        o = obs[:, j].astype(np.float64)
        term = o * e[j] / p_hat[j] + gamma[j] * e_hat[j] * (1.0 - o / p_hat[j])
        s, c = _add_columns(s, c, term)
    return (s + c) / float(n)


def auc_from_sorted(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = scores.shape[0]
    n_pos = labels.sum()
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    starts = np.flatnonzero(np.r_[True, scores[1:] != scores[:-1]])
    ends = np.r_[starts[1:], n]
    avg_rank = 0.5 * (starts + 1 + ends)
    pos_in_block = np.add.reduceat(labels, starts)
    rank_sum = float(np.dot(pos_in_block, avg_rank))
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
