# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled CTC kernels; mirrors ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p

cnp.import_array()

cdef double LOG_ZERO = -1.0e30


cdef inline double _lae(double a, double b) noexcept nogil:
    if a < b:
        a, b = b, a
    if b <= LOG_ZERO:
        return a
    return a + log1p(exp(b - a))


cdef inline bint _skip_ok(const cnp.int64_t[::1] ext, Py_ssize_t s) noexcept nogil:
    return s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]


def forward_backward(const double[:, ::1] logp, const cnp.int64_t[::1] ext):
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t T = logp.shape[1]
    cdef Py_ssize_t s, t
    cdef double acc, ll
    alpha_arr = np.full((S, T), LOG_ZERO)
    beta_arr = np.full((S, T), LOG_ZERO)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr

    with nogil:
        alpha[0, 0] = logp[ext[0], 0]
        if S > 1:
            alpha[1, 0] = logp[ext[1], 0]
        for t in range(1, T):
            for s in range(S):
                acc = alpha[s, t - 1]
                if s >= 1:
                    acc = _lae(acc, alpha[s - 1, t - 1])
                if _skip_ok(ext, s):
                    acc = _lae(acc, alpha[s - 2, t - 1])
                acc = acc + logp[ext[s], t]
                alpha[s, t] = acc if acc > LOG_ZERO else LOG_ZERO

        beta[S - 1, T - 1] = 0.0
        if S > 1:
            beta[S - 2, T - 1] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                acc = beta[s, t + 1] + logp[ext[s], t + 1]
                if s + 1 < S:
                    acc = _lae(acc, beta[s + 1, t + 1] + logp[ext[s + 1], t + 1])
                if s + 2 < S and _skip_ok(ext, s + 2):
                    acc = _lae(acc, beta[s + 2, t + 1] + logp[ext[s + 2], t + 1])
                beta[s, t] = acc if acc > LOG_ZERO else LOG_ZERO

        if S > 1:
            ll = _lae(alpha[S - 1, T - 1], alpha[S - 2, T - 1])
        else:
            ll = alpha[0, T - 1]
    return alpha_arr, beta_arr, float(ll)


def ctc_fb(const double[:, ::1] logp, const cnp.int64_t[::1] ext):
    alpha_arr, beta_arr, ll = forward_backward(logp, ext)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t T = logp.shape[1]
    cdef Py_ssize_t s, t
    cdef double lld = ll
    occ_arr = np.zeros((logp.shape[0], T))
    cdef double[:, ::1] occ = occ_arr
    with nogil:
        for s in range(S):
            for t in range(T):
                occ[ext[s], t] += exp(alpha[s, t] + beta[s, t] - lld)
    return ll, occ_arr


def viterbi(const double[:, ::1] logp, const cnp.int64_t[::1] ext):
    cdef Py_ssize_t S = ext.shape[0]
    cdef Py_ssize_t T = logp.shape[1]
    cdef Py_ssize_t s, t, choice
    cdef double acc, v, val
    best_arr = np.full((S, T), LOG_ZERO)
    cdef double[:, ::1] best = best_arr
    path_arr = np.empty(T, dtype=np.int64)
    cdef cnp.int64_t[::1] path = path_arr

    with nogil:
        best[S - 1, T - 1] = 0.0
        if S > 1:
            best[S - 2, T - 1] = 0.0
        for t in range(T - 2, -1, -1):
            for s in range(S):
                acc = best[s, t + 1] + logp[ext[s], t + 1]
                if s + 1 < S:
                    v = best[s + 1, t + 1] + logp[ext[s + 1], t + 1]
                    if v > acc:
                        acc = v
                if s + 2 < S and _skip_ok(ext, s + 2):
                    v = best[s + 2, t + 1] + logp[ext[s + 2], t + 1]
                    if v > acc:
                        acc = v
                best[s, t] = acc if acc > LOG_ZERO else LOG_ZERO

        s = 0
        if S > 1 and logp[ext[1], 0] + best[1, 0] >= logp[ext[0], 0] + best[0, 0]:
            s = 1
        path[0] = s
        for t in range(1, T):
            choice = s
            val = logp[ext[s], t] + best[s, t]
            if s + 1 < S:
                v = logp[ext[s + 1], t] + best[s + 1, t]
                if v >= val:
                    choice = s + 1
                    val = v
            if s + 2 < S and _skip_ok(ext, s + 2):
                v = logp[ext[s + 2], t] + best[s + 2, t]
                if v >= val:
                    choice = s + 2
                    val = v
            s = choice
            path[t] = s
    return path_arr
