# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every routine here has a numpy twin in ``_core_py`` that performs the same
floating-point operations in the same order, so both backends return
bit-identical results.
"""
import numpy as np

from libc.math cimport fabs


cdef inline void _add(double* s, double* c, double x) noexcept nogil:
    # Neumaier's variant of Kahan summation
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        c[0] += (s[0] - t) + x
    else:
        c[0] += (x - t) + s[0]
    s[0] = t


def compensated_sum(const double[::1] x):
    cdef Py_ssize_t i
    cdef double s = 0.0, c = 0.0
    with nogil:
        for i in range(x.shape[0]):
            _add(&s, &c, x[i])
    return s + c


def compensated_row_sums(const double[:, ::1] x):
    cdef Py_ssize_t r, j
    cdef double s, c
    out = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for r in range(x.shape[0]):
            s = 0.0
            c = 0.0
            for j in range(x.shape[1]):
                _add(&s, &c, x[r, j])
            res[r] = s + c
    return out


def cdr_trial_losses(
    const unsigned char[:, ::1] obs,
    const double[::1] e,
    const double[::1] e_hat,
    const double[::1] p_hat,
    const double[::1] gamma,
):
    """Mean CDR term per row of an observation matrix (trials x pairs)."""
    cdef Py_ssize_t r, j
    cdef Py_ssize_t n = obs.shape[1]
    cdef double s, c, o, term
    cdef double dn = <double>n
    out = np.empty(obs.shape[0], dtype=np.float64)
    cdef double[::1] res = out
    with nogil:
        for r in range(obs.shape[0]):
            s = 0.0
            c = 0.0
            for j in range(n):
                o = <double>obs[r, j]
                term = o * e[j] / p_hat[j] + gamma[j] * e_hat[j] * (1.0 - o / p_hat[j])
                _add(&s, &c, term)
            res[r] = (s + c) / dn
    return out


def auc_from_sorted(const double[::1] scores, const double[::1] labels):
    """Tie-aware AUC over scores already sorted ascending."""
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t i = 0, j
    cdef double n_pos = 0.0, n_neg = 0.0, rank_sum = 0.0, avg_rank, pos_in_block
    with nogil:
        while i < n:
            j = i
            pos_in_block = 0.0
            while j < n and scores[j] == scores[i]:
                pos_in_block += labels[j]
                j += 1
            # ranks i+1 .. j share their average
            avg_rank = 0.5 * <double>(i + 1 + j)
            rank_sum += pos_in_block * avg_rank
            n_pos += pos_in_block
            i = j
        n_neg = <double>n - n_pos
    if n_pos == 0.0 or n_neg == 0.0:
        return float("nan")
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
