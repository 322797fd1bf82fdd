# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled single-sample SINR, soft-min utility gradient and projection.

Same signatures and results as :mod:`papc._kernels_py`. Coherent terms are only
accumulated for user pairs that share pilots, so the cost is O(M K) plus
O(M * #sharing pairs) instead of O(M K^2).
"""
import numpy as np

from libc.math cimport exp, log, log1p, sqrt

cdef double LN2 = 0.6931471805599453


cdef void _pairs(const double[:, ::1] S, Py_ssize_t[::1] ptr, Py_ssize_t[::1] idx) noexcept nogil:
    """Column-wise index of the nonzero entries of S: rows idx[ptr[i]:ptr[i+1]] for column i."""
    cdef Py_ssize_t K = S.shape[0], i, k, n = 0
    for i in range(K):
        ptr[i] = n
        for k in range(K):
            if S[k, i] != 0.0:
                idx[n] = k
                n += 1
    ptr[K] = n


cdef void _forward(const double[:, ::1] B, const double[:, ::1] S, const double[:, ::1] W,
                   const double[:, ::1] Mu, double zeta_d, int N,
                   const Py_ssize_t[::1] ptr, const Py_ssize_t[::1] idx,
                   double[:, ::1] A, double[::1] gamma, double[::1] den) noexcept nogil:
    cdef Py_ssize_t M = B.shape[0], K = B.shape[1]
    cdef Py_ssize_t m, i, k, j
    cdef double x, rs, acc, d
    for k in range(K):
        for i in range(K):
            A[k, i] = 0.0
        den[k] = 0.0
    for m in range(M):
        rs = 0.0
        for i in range(K):
            x = Mu[m, i]
            rs += x * x
            x = x * W[m, i]
            if x == 0.0:
                continue
            for j in range(ptr[i], ptr[i + 1]):
                k = idx[j]
                A[k, i] += B[m, k] * x
        for k in range(K):
            den[k] += B[m, k] * rs  # power term, finished below
    for k in range(K):
        acc = 0.0
        for i in range(K):
            A[k, i] *= S[k, i]
            if i != k:
                acc += A[k, i] * A[k, i]
        den[k] = zeta_d * acc + (zeta_d / N) * den[k] + 1.0 / (<double>N * N)
        d = A[k, k]
        gamma[k] = zeta_d * d * d / den[k]


def sinr(const double[:, ::1] B, const double[:, ::1] S, const double[:, ::1] W,
         const double[:, ::1] Mu, double zeta_d, int N):
    cdef Py_ssize_t K = B.shape[1]
    A = np.empty((K, K))
    gamma = np.empty(K)
    den = np.empty(K)
    cdef Py_ssize_t[::1] ptr = np.empty(K + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] idx = np.empty(K * K, dtype=np.intp)
    _pairs(S, ptr, idx)
    _forward(B, S, W, Mu, zeta_d, N, ptr, idx, A, gamma, den)
    return gamma


cdef double _softmin(double[::1] se, const unsigned char[::1] active, double lam,
                     double[::1] weights) noexcept nogil:
    cdef Py_ssize_t K = se.shape[0], k
    cdef double smin = 1e308, tot = 0.0, e
    cdef int n = 0
    for k in range(K):
        if active[k] and se[k] < smin:
            smin = se[k]
    for k in range(K):
        if active[k]:
            e = exp(-lam * (se[k] - smin))
            weights[k] = e
            tot += e
            n += 1
        else:
            weights[k] = 0.0
    for k in range(K):
        weights[k] /= tot
    return smin - log(tot / n) / lam


def utility(const double[:, ::1] B, const double[:, ::1] S, const double[:, ::1] W,
            const double[:, ::1] Mu, const unsigned char[::1] active,
            double zeta_d, int N, double prelog, double lam):
    cdef Py_ssize_t K = B.shape[1], k
    cdef double[:, ::1] A = np.empty((K, K))
    cdef double[::1] gamma = np.empty(K)
    cdef double[::1] den = np.empty(K)
    cdef double[::1] se = np.empty(K)
    cdef double[::1] wts = np.empty(K)
    cdef Py_ssize_t[::1] ptr = np.empty(K + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] idx = np.empty(K * K, dtype=np.intp)
    cdef double u
    with nogil:
        _pairs(S, ptr, idx)
        _forward(B, S, W, Mu, zeta_d, N, ptr, idx, A, gamma, den)
        for k in range(K):
            se[k] = prelog * log1p(gamma[k]) / LN2
        u = _softmin(se, active, lam, wts)
    return u


def utility_grad(const double[:, ::1] B, const double[:, ::1] S, const double[:, ::1] W,
                 const double[:, ::1] Mu, const unsigned char[::1] active,
                 double zeta_d, int N, double prelog, double lam):
    cdef Py_ssize_t M = B.shape[0], K = B.shape[1]
    cdef Py_ssize_t m, i, k, j
    cdef double[:, ::1] A = np.empty((K, K))
    cdef double[::1] gamma = np.empty(K)
    cdef double[::1] den = np.empty(K)
    cdef double[::1] se = np.empty(K)
    cdef double[::1] wts = np.empty(K)
    cdef double[::1] g = np.empty(K)
    cdef double[::1] gt = np.empty(K)
    cdef double[:, ::1] GA = np.zeros((K, K))
    grad_arr = np.empty((M, K))
    cdef double[:, ::1] grad = grad_arr
    cdef Py_ssize_t[::1] ptr = np.empty(K + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] idx = np.empty(K * K, dtype=np.intp)
    cdef double u, acc, acc2, c
    with nogil:
        _pairs(S, ptr, idx)
        _forward(B, S, W, Mu, zeta_d, N, ptr, idx, A, gamma, den)
        for k in range(K):
            se[k] = prelog * log1p(gamma[k]) / LN2
        u = _softmin(se, active, lam, wts)
        for k in range(K):
            g[k] = wts[k] * prelog / ((1.0 + gamma[k]) * LN2) / den[k]
            gt[k] = -g[k] * gamma[k] * zeta_d / N
            c = 2.0 * zeta_d * g[k]
            for i in range(K):
                if S[k, i] != 0.0:
                    if i == k:
                        GA[k, i] = c * A[k, i] * S[k, i]
                    else:
                        GA[k, i] = -c * gamma[k] * A[k, i] * S[k, i]
        for m in range(M):
            acc2 = 0.0
            for k in range(K):
                acc2 += B[m, k] * gt[k]
            for i in range(K):
                acc = 0.0
                for j in range(ptr[i], ptr[i + 1]):
                    k = idx[j]
                    acc += GA[k, i] * B[m, k]
                grad[m, i] = W[m, i] * acc + 2.0 * Mu[m, i] * acc2
    return u, grad_arr


def project_rows(const double[:, ::1] X, double radius):
    cdef Py_ssize_t M = X.shape[0], K = X.shape[1], m, k
    out = np.empty((M, K))
    cdef double[:, ::1] Y = out
    cdef double sq, x, f, lim = radius * radius * (1.0 + 1e-14)
    with nogil:
        for m in range(M):
            sq = 0.0
            for k in range(K):
                x = X[m, k]
                if x < 0.0:
                    x = 0.0
                Y[m, k] = x
                sq += x * x
            if sq > lim:
                f = radius / sqrt(sq)
                for k in range(K):
                    Y[m, k] *= f
    return out
